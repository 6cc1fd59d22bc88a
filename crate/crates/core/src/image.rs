//! 2D rasters: photographs, slices and their foreground masks.
//!
//! Physical coordinates are centred: pixel `(row, col)` sits at
//! `x = (col - (w-1)/2) * pixel_size`, `y = (row - (h-1)/2) * pixel_size`
//! millimetres. Values are stored row-major with channels interleaved, so
//! index order is `(row, col, channel)`.

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Output grid of a 2D resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2 {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

impl Grid2 {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid("grid must have at least one pixel");
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return invalid(format!("pixel size must be positive, got {pixel_size}"));
        }
        Ok(Grid2 {
            width,
            height,
            pixel_size,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn center(&self) -> [f64; 2] {
        [
            (self.width as f64 - 1.0) * 0.5,
            (self.height as f64 - 1.0) * 0.5,
        ]
    }

    /// Centred physical coordinate of a (col, row) pixel position.
    #[inline]
    pub fn to_mm(&self, col: f64, row: f64) -> [f64; 2] {
        let c = self.center();
        [
            (col - c[0]) * self.pixel_size,
            (row - c[1]) * self.pixel_size,
        ]
    }

    #[inline]
    pub fn to_pixel(&self, mm: [f64; 2]) -> [f64; 2] {
        let c = self.center();
        [
            mm[0] / self.pixel_size + c[0],
            mm[1] / self.pixel_size + c[1],
        ]
    }

    /// Grid coarsened by `factor`, sharing the same physical centre.
    pub fn coarsen(&self, factor: usize) -> Grid2 {
        Grid2 {
            width: self.width.div_ceil(factor).max(1),
            height: self.height.div_ceil(factor).max(1),
            pixel_size: self.pixel_size * factor as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    pixel_size: f64,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixel_size: f64,
        data: Vec<T>,
    ) -> Result<Self> {
        Grid2::new(width, height, pixel_size)?;
        if channels == 0 {
            return invalid("image needs at least one channel");
        }
        if data.len() != width * height * channels {
            return invalid(format!(
                "raster length {} does not match {width}x{height}x{channels}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("image values must be finite");
        }
        Ok(Image {
            width,
            height,
            channels,
            pixel_size,
            data,
        })
    }

    pub fn zeros(grid: Grid2, channels: usize) -> Self {
        Image {
            width: grid.width,
            height: grid.height,
            channels,
            pixel_size: grid.pixel_size,
            data: vec![T::zero(); grid.len() * channels],
        }
    }

    pub fn from_fn(
        grid: Grid2,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(grid.len() * channels);
        for r in 0..grid.height {
            for c in 0..grid.width {
                for ch in 0..channels {
                    data.push(T::of(f(r, c, ch)));
                }
            }
        }
        Image {
            width: grid.width,
            height: grid.height,
            channels,
            pixel_size: grid.pixel_size,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    /// Mutable raster access; callers keep values finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grid(&self) -> Grid2 {
        Grid2 {
            width: self.width,
            height: self.height,
            pixel_size: self.pixel_size,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn with_pixel_size(mut self, pixel_size: f64) -> Result<Self> {
        Grid2::new(self.width, self.height, pixel_size)?;
        self.pixel_size = pixel_size;
        Ok(self)
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, ch: usize) -> Image<T> {
        let data = self
            .data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixel_size: self.pixel_size,
            data,
        }
    }

    pub fn convert<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            pixel_size: self.pixel_size,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn from_raw(grid: Grid2, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), grid.len() * channels);
        Image {
            width: grid.width,
            height: grid.height,
            channels,
            pixel_size: grid.pixel_size,
            data,
        }
    }

    pub fn same_grid(&self, other_grid: &Grid2) -> bool {
        self.width == other_grid.width
            && self.height == other_grid.height
            && self.pixel_size == other_grid.pixel_size
    }
}

/// Single-channel raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask<T>(Image<T>);

impl<T: Real> Mask<T> {
    pub fn new(width: usize, height: usize, pixel_size: f64, data: Vec<T>) -> Result<Self> {
        Self::from_image(Image::new(width, height, 1, pixel_size, data)?)
    }

    pub fn from_image(img: Image<T>) -> Result<Self> {
        if img.channels != 1 {
            return invalid("mask must have a single channel");
        }
        if img.data.iter().any(|v| {
            let v = v.as_f64();
            !(0.0..=1.0).contains(&v)
        }) {
            return invalid("mask values must lie in [0, 1]");
        }
        Ok(Mask(img))
    }

    /// Clamp into `[0, 1]` and wrap.
    pub fn from_image_clamped(mut img: Image<T>) -> Self {
        assert_eq!(img.channels, 1);
        for v in img.data.iter_mut() {
            *v = T::of(v.as_f64().clamp(0.0, 1.0));
        }
        Mask(img)
    }

    pub fn zeros(grid: Grid2) -> Self {
        Mask(Image::zeros(grid, 1))
    }

    pub fn from_fn(grid: Grid2, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Mask::from_image_clamped(Image::from_fn(grid, 1, |r, c, _| f(r, c)))
    }

    #[inline]
    pub fn image(&self) -> &Image<T> {
        &self.0
    }
    pub fn into_image(self) -> Image<T> {
        self.0
    }
    #[inline]
    pub fn grid(&self) -> Grid2 {
        self.0.grid()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.0.data
    }
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.0.get(row, col, 0)
    }
    pub fn width(&self) -> usize {
        self.0.width
    }
    pub fn height(&self) -> usize {
        self.0.height
    }
    pub fn pixel_size(&self) -> f64 {
        self.0.pixel_size
    }

    pub fn sum(&self) -> f64 {
        self.0.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Binary copy: 1 where the value is at least `threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask<T> {
        let data = self
            .0
            .data
            .iter()
            .map(|v| {
                if v.as_f64() >= threshold {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        Mask(Image::from_raw(self.grid(), 1, data))
    }

    /// Inclusive bounding box `(row0, row1, col0, col1)` of values above `level`.
    pub fn bounding_box(&self, level: f64) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height() {
            for c in 0..self.width() {
                if self.get(r, c).as_f64() > level {
                    bb = Some(match bb {
                        None => (r, r, c, c),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    pub fn convert<U: Real>(&self) -> Mask<U> {
        Mask(self.0.convert())
    }
}

pub(crate) fn check_same_grid(a: Grid2, b: Grid2, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {}x{} @ {} mm vs {}x{} @ {} mm",
            a.width, a.height, a.pixel_size, b.width, b.height, b.pixel_size
        )));
    }
    Ok(())
}
