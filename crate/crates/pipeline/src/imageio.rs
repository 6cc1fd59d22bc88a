//! Photographs in, 16-bit previews and 8-bit masks out.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use photovol::image::{Image, Mask};
use photovol::scalar::Real;

use crate::error::{self, PipelineError, Result};

pub const PHOTO_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_photo(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| PHOTO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decode an 8- or 16-bit PNG/JPEG as RGB in `[0, 1]` with unit pixel size.
pub fn decode_photo(bytes: &[u8], path: &Path) -> Result<Image<f64>> {
    let img =
        image::load_from_memory(bytes).map_err(|e| PipelineError::format(path, e.to_string()))?;
    let rgb = img.to_rgb16();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 65535.0)
        .collect();
    Ok(Image::new(w as usize, h as usize, 3, 1.0, data)?)
}

pub fn read_photo(path: &Path) -> Result<Image<f64>> {
    decode_photo(&error::read(path)?, path)
}

fn png_bytes(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory");
    out.into_inner()
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 16-bit RGB PNG of a 1- or 3-channel image (values clamped to `[0, 1]`).
pub fn encode_rgb16<T: Real>(img: &Image<T>) -> Result<Vec<u8>> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if ch != 1 && ch != 3 {
        return Err(PipelineError::Unsupported(format!(
            "cannot store a {ch}-channel image as PNG"
        )));
    }
    let mut raw = Vec::with_capacity(w * h * 3);
    for px in img.data().chunks(ch) {
        for c in 0..3 {
            raw.push(quantize16(px[c.min(ch - 1)].as_f64()));
        }
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    Ok(png_bytes(DynamicImage::ImageRgb16(buf)))
}

pub fn write_rgb16<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    error::write(path, &encode_rgb16(img)?)
}

/// 8-bit greyscale PNG with 255 where the mask is at least one half.
pub fn encode_mask<T: Real>(mask: &Mask<T>) -> Vec<u8> {
    let raw = mask
        .data()
        .iter()
        .map(|v| if v.as_f64() >= 0.5 { 255u8 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("buffer size");
    png_bytes(DynamicImage::ImageLuma8(buf))
}

pub fn write_mask<T: Real>(path: &Path, mask: &Mask<T>) -> Result<()> {
    error::write(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path, pixel_size: f64) -> Result<Mask<f64>> {
    let img = image::load_from_memory(&error::read(path)?)
        .map_err(|e| PipelineError::format(path, e.to_string()))?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let data = g
        .into_raw()
        .into_iter()
        .map(|v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(Mask::new(w as usize, h as usize, pixel_size, data)?)
}

/// 8-bit RGB PNG from interleaved RGB bytes.
pub fn encode_rgb8(width: usize, height: usize, raw: Vec<u8>) -> Vec<u8> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer size");
    png_bytes(DynamicImage::ImageRgb8(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use photovol::image::Grid2;

    #[test]
    fn rgb16_round_trip_is_exact_on_the_quantisation_grid() {
        let g = Grid2::new(5, 4, 1.0).unwrap();
        let img: Image<f64> = Image::from_fn(g, 3, |r, c, ch| {
            ((r * 7 + c * 3 + ch * 11) % 16) as f64 * 4369.0 / 65535.0
        });
        let back = decode_photo(&encode_rgb16(&img).unwrap(), Path::new("x.png")).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn mask_png_round_trip() {
        let g = Grid2::new(6, 3, 0.5).unwrap();
        let m: Mask<f64> = Mask::from_fn(g, |r, c| f64::from((r + c) % 2 == 0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_mask(&p, &m).unwrap();
        let back = read_mask(&p, 0.5).unwrap();
        assert_eq!(back.data(), m.data());
        assert_eq!(back.pixel_size(), 0.5);
    }

    #[test]
    fn encoding_is_deterministic() {
        let g = Grid2::new(9, 9, 1.0).unwrap();
        let img: Image<f64> = Image::from_fn(g, 1, |r, c, _| (r * c) as f64 / 64.0);
        assert_eq!(encode_rgb16(&img).unwrap(), encode_rgb16(&img).unwrap());
    }
}
