//! Resampling of slices and volumes through transforms, and the box filters
//! used for multi-scale pyramids.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Grid2, Image, Mask};
use crate::interp::{bilinear, trilinear};
use crate::linalg::{mat3_mul, mat3_transpose, mat3_vec, Mat3};
use crate::scalar::Real;
use crate::transform::{Affine2D, Rigid3DScale};
use crate::volume::{Grid3, Volume};

/// Output-pixel → source-pixel affine `[m00, m01, m10, m11, o0, o1]` for
/// `(col, row)` coordinates.
pub(crate) fn pixel_map(src: Grid2, t: &Affine2D, out: Grid2) -> [f64; 6] {
    let r = out.pixel_size / src.pixel_size;
    let p = &t.params;
    let m = [r * p[0], r * p[1], r * p[2], r * p[3]];
    let co = out.center();
    let cs = src.center();
    let o0 = -(m[0] * co[0] + m[1] * co[1]) + p[4] / src.pixel_size + cs[0];
    let o1 = -(m[2] * co[0] + m[3] * co[1]) + p[5] / src.pixel_size + cs[1];
    [m[0], m[1], m[2], m[3], o0, o1]
}

/// Resample `src` onto `out` through `t` (output mm → source mm) with
/// bilinear interpolation. Samples outside `src` read as 0.
pub fn resample_slice<T: Real>(src: &Image<T>, t: &Affine2D, out: Grid2) -> Result<Image<T>> {
    if t.det() == 0.0 || !t.params.iter().all(|v| v.is_finite()) {
        return Err(Error::NonInvertible);
    }
    Grid2::new(out.width, out.height, out.pixel_size)?;
    let ch = src.channels();
    let m = pixel_map(src.grid(), t, out);
    let (w, h) = (src.width(), src.height());
    let data = src.data();
    let mut dst = vec![T::zero(); out.len() * ch];
    dst.par_chunks_mut(out.width * ch)
        .enumerate()
        .for_each(|(row, line)| {
            let mut val = vec![0.0; ch];
            let rf = row as f64;
            for col in 0..out.width {
                let cf = col as f64;
                let u = m[0] * cf + m[1] * rf + m[4];
                let v = m[2] * cf + m[3] * rf + m[5];
                bilinear(data, w, h, ch, u, v, &mut val);
                for c in 0..ch {
                    line[col * ch + c] = T::of(val[c]);
                }
            }
        });
    Ok(Image::from_raw(out, ch, dst))
}

pub fn resample_mask<T: Real>(src: &Mask<T>, t: &Affine2D, out: Grid2) -> Result<Mask<T>> {
    Ok(Mask::from_image_clamped(resample_slice(
        src.image(),
        t,
        out,
    )?))
}

/// Output-voxel → source-voxel map `(L, o)` so that `src_ijk = L·ijk + o`.
pub(crate) fn voxel_map(src: &Grid3, t: &Rigid3DScale, out: &Grid3) -> (Mat3, [f64; 3]) {
    let w2g = src.world_to_grid();
    let wl: Mat3 = [
        [w2g[0][0], w2g[0][1], w2g[0][2]],
        [w2g[1][0], w2g[1][1], w2g[1][2]],
        [w2g[2][0], w2g[2][1], w2g[2][2]],
    ];
    let wo = [w2g[0][3], w2g[1][3], w2g[2][3]];
    let rt = mat3_transpose(&t.rotation());
    let g = &out.grid_to_world;
    let mut sg: Mat3 = [
        [g[0][0], g[0][1], g[0][2]],
        [g[1][0], g[1][1], g[1][2]],
        [g[2][0], g[2][1], g[2][2]],
    ];
    let mut so = [g[0][3], g[1][3], g[2][3]];
    for c in 0..3 {
        sg[2][c] *= t.z_scale;
    }
    so[2] *= t.z_scale;
    let tt = &t.translation;
    let so = [so[0] - tt[0], so[1] - tt[1], so[2] - tt[2]];
    let a = mat3_mul(&wl, &rt);
    let l = mat3_mul(&a, &sg);
    let o = mat3_vec(&a, so);
    (l, [o[0] + wo[0], o[1] + wo[1], o[2] + wo[2]])
}

/// Resample `src` onto `out` through `t` with trilinear interpolation.
/// The z scale is applied along the stacking axis of the output grid before
/// the rigid part.
pub fn resample_volume<T: Real>(
    src: &Volume<T>,
    t: &Rigid3DScale,
    out: &Grid3,
) -> Result<Volume<T>> {
    if !(t.z_scale > 0.0) {
        return Err(Error::NonInvertible);
    }
    let out = Grid3::new(out.dims, out.grid_to_world)?;
    if *t == Rigid3DScale::identity() && out == *src.grid() {
        return Ok(src.clone());
    }
    let ch = src.channels();
    let (l, o) = voxel_map(src.grid(), t, &out);
    let sd = src.dims();
    let data = src.data();
    let mut dst = vec![T::zero(); out.len() * ch];
    dst.par_chunks_mut(out.dims[0] * ch)
        .enumerate()
        .for_each(|(line_idx, line)| {
            let j = (line_idx % out.dims[1]) as f64;
            let k = (line_idx / out.dims[1]) as f64;
            let mut val = vec![0.0; ch];
            for i in 0..out.dims[0] {
                let p = [i as f64, j, k];
                let q = [
                    l[0][0] * p[0] + l[0][1] * p[1] + l[0][2] * p[2] + o[0],
                    l[1][0] * p[0] + l[1][1] * p[1] + l[1][2] * p[2] + o[1],
                    l[2][0] * p[0] + l[2][1] * p[1] + l[2][2] * p[2] + o[2],
                ];
                trilinear(data, sd, ch, q, &mut val);
                for c in 0..ch {
                    line[i * ch + c] = T::of(val[c]);
                }
            }
        });
    Ok(Volume::from_raw(out, ch, dst))
}

/// Centred box kernel of width `factor` samples. Even widths use half-weight
/// end taps so the kernel stays symmetric about the sample.
pub fn box_kernel(factor: usize) -> Vec<f64> {
    if factor <= 1 {
        return vec![1.0];
    }
    let f = factor as f64;
    if factor % 2 == 1 {
        vec![1.0 / f; factor]
    } else {
        let mut k = vec![1.0 / f; factor + 1];
        k[0] = 0.5 / f;
        k[factor] = 0.5 / f;
        k
    }
}

fn convolve_axis(
    data: &[f64],
    dims: [usize; 3],
    ch: usize,
    axis: usize,
    kernel: &[f64],
) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let half = (kernel.len() / 2) as isize;
    let strides = [ch, dims[0] * ch, dims[0] * dims[1] * ch];
    let n = dims[axis] as isize;
    let stride = strides[axis];
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(dims[0] * ch)
        .enumerate()
        .for_each(|(line_idx, line)| {
            let j = line_idx % dims[1];
            let k = line_idx / dims[1];
            for i in 0..dims[0] {
                let pos = [i, j, k];
                let base = (k * dims[1] + j) * dims[0] * ch + i * ch;
                let coord = pos[axis] as isize;
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let s = coord + t as isize - half;
                        if s >= 0 && s < n {
                            let idx = (base as isize + (s - coord) * stride as isize) as usize + c;
                            acc += w * data[idx];
                        }
                    }
                    line[i * ch + c] = acc;
                }
            }
        });
    out
}

/// Separable box blur of an image by `factor` pixels, zero padded.
pub fn box_blur_image<T: Real>(img: &Image<T>, factor: usize) -> Image<T> {
    if factor <= 1 {
        return img.clone();
    }
    let k = box_kernel(factor);
    let dims = [img.width(), img.height(), 1];
    let ch = img.channels();
    let data: Vec<f64> = img.data().iter().map(|v| v.as_f64()).collect();
    let data = convolve_axis(&data, dims, ch, 0, &k);
    let data = convolve_axis(&data, dims, ch, 1, &k);
    Image::from_raw(img.grid(), ch, data.into_iter().map(T::of).collect())
}

pub fn box_blur_mask<T: Real>(m: &Mask<T>, factor: usize) -> Mask<T> {
    Mask::from_image_clamped(box_blur_image(m.image(), factor))
}

/// Separable box blur of a volume with per-axis widths.
pub fn box_blur_volume<T: Real>(vol: &Volume<T>, factors: [usize; 3]) -> Volume<T> {
    if factors.iter().all(|&f| f <= 1) {
        return vol.clone();
    }
    let ch = vol.channels();
    let dims = vol.dims();
    let mut data: Vec<f64> = vol.data().iter().map(|v| v.as_f64()).collect();
    for (axis, &f) in factors.iter().enumerate() {
        data = convolve_axis(&data, dims, ch, axis, &box_kernel(f));
    }
    Volume::from_raw(*vol.grid(), ch, data.into_iter().map(T::of).collect())
}

/// Separable Gaussian blur with per-axis sigma in voxels, zero padded.
pub fn gaussian_blur_volume<T: Real>(vol: &Volume<T>, sigma_vox: [f64; 3]) -> Volume<T> {
    let ch = vol.channels();
    let dims = vol.dims();
    let mut data: Vec<f64> = vol.data().iter().map(|v| v.as_f64()).collect();
    for (axis, &s) in sigma_vox.iter().enumerate() {
        if s <= 0.0 {
            continue;
        }
        let r = (3.0 * s).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r)
            .map(|x| (-(x * x) as f64 / (2.0 * s * s)).exp())
            .collect();
        let norm: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= norm);
        data = convolve_axis(&data, dims, ch, axis, &k);
    }
    Volume::from_raw(*vol.grid(), ch, data.into_iter().map(T::of).collect())
}

/// Integer prefilter width for sampling a grid of `src_ps` at `out_ps`.
pub fn antialias_factor(src_ps: f64, out_ps: f64) -> usize {
    let r = out_ps / src_ps;
    if r < 1.5 {
        1
    } else {
        r.round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::IDENTITY4;

    fn one_hot(w: usize, h: usize, r: usize, c: usize) -> Image<f64> {
        Image::from_fn(Grid2::new(w, h, 0.7).unwrap(), 1, |rr, cc, _| {
            if rr == r && cc == c {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identity_resample_is_exact() {
        let g = Grid2::new(7, 5, 0.1).unwrap();
        let img: Image<f64> = Image::from_fn(g, 3, |r, c, ch| (r * 31 + c * 7 + ch) as f64 * 0.013);
        let out = resample_slice(&img, &Affine2D::identity(), g).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn one_pixel_translation_shifts_one_column() {
        let img = one_hot(6, 5, 2, 3);
        let out = resample_slice(&img, &Affine2D::translation(0.7, 0.0), img.grid()).unwrap();
        assert!((out.get(2, 2, 0) - 1.0).abs() < 1e-12);
        assert!(out.data().iter().map(|v| v.abs()).sum::<f64>() - 1.0 < 1e-12);
    }

    #[test]
    fn singular_transform_rejected() {
        let img = one_hot(3, 3, 1, 1);
        let t = Affine2D {
            params: [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(
            resample_slice(&img, &t, img.grid()),
            Err(Error::NonInvertible)
        );
    }

    #[test]
    fn volume_identity_and_translation() {
        let g = Grid3::centered([5, 4, 3], [1.0, 1.0, 1.0]).unwrap();
        let v: Volume<f64> = Volume::from_fn(
            g,
            1,
            |[i, j, k], _| if [i, j, k] == [2, 1, 1] { 1.0 } else { 0.0 },
        );
        assert_eq!(
            resample_volume(&v, &Rigid3DScale::identity(), &g).unwrap(),
            v
        );
        let t = Rigid3DScale::new([0.0; 3], [1.0, 0.0, 0.0], 1.0).unwrap();
        let out = resample_volume(&v, &t, &g).unwrap();
        // reference moved by +1 mm along x
        assert!((out.get(3, 1, 1, 0) - 1.0).abs() < 1e-12);
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_kernel_sums_to_one() {
        for f in 1..6 {
            assert!((box_kernel(f).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn box_blur_preserves_interior_mass() {
        let g = Grid3::new([9, 9, 9], IDENTITY4).unwrap();
        let v: Volume<f64> = Volume::from_fn(
            g,
            1,
            |[i, j, k], _| if [i, j, k] == [4, 4, 4] { 1.0 } else { 0.0 },
        );
        let b = box_blur_volume(&v, [2, 2, 4]);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        let gb = gaussian_blur_volume(&v, [1.0, 1.0, 1.0]);
        assert!((gb.sum() - 1.0).abs() < 1e-12);
    }
}
