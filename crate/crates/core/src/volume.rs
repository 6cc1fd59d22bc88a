//! 3D rasters with an explicit voxel-to-world affine.
//!
//! Voxel `(i, j, k)` (i along x / columns, j along y / rows, k along the
//! stacking axis) is stored at `((k * ny + j) * nx + i) * channels + c`.

use crate::error::{invalid, Error, Result};
use crate::image::{Grid2, Image};
use crate::linalg::{linear_part, mat4_inverse, mat4_point, Mat3, Mat4};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub grid_to_world: Mat4,
}

impl Grid3 {
    pub fn new(dims: [usize; 3], grid_to_world: Mat4) -> Result<Self> {
        if dims.contains(&0) {
            return invalid("volume dimensions must be positive");
        }
        if grid_to_world.iter().flatten().any(|v| !v.is_finite())
            || mat4_inverse(&grid_to_world).is_none()
        {
            return Err(Error::NonInvertible);
        }
        let g = Grid3 {
            dims,
            grid_to_world,
        };
        if g.voxel_size().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NonInvertible);
        }
        Ok(g)
    }

    /// Axis-aligned grid centred on the world origin.
    pub fn centered(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut m = crate::linalg::IDENTITY4;
        for a in 0..3 {
            m[a][a] = voxel_size[a];
            m[a][3] = -(dims[a] as f64 - 1.0) * 0.5 * voxel_size[a];
        }
        Grid3::new(dims, m)
    }

    /// Grid of a slice stack: in-plane centred coordinates as in [`Grid2`],
    /// slices `thickness` apart and centred along z.
    pub fn stack(plane: Grid2, n_slices: usize, thickness: f64) -> Result<Self> {
        Grid3::centered(
            [plane.width, plane.height, n_slices],
            [plane.pixel_size, plane.pixel_size, thickness],
        )
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        let l = linear_part(&self.grid_to_world);
        [0, 1, 2].map(|c| (l[0][c] * l[0][c] + l[1][c] * l[1][c] + l[2][c] * l[2][c]).sqrt())
    }

    pub fn world_to_grid(&self) -> Mat4 {
        mat4_inverse(&self.grid_to_world).expect("grid_to_world validated invertible")
    }

    #[inline]
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        mat4_point(&self.grid_to_world, ijk)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    /// Voxel coordinates of a linear index.
    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn linear(&self) -> Mat3 {
        linear_part(&self.grid_to_world)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    grid: Grid3,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid3, channels: usize, data: Vec<T>) -> Result<Self> {
        Grid3::new(grid.dims, grid.grid_to_world)?;
        if channels == 0 {
            return invalid("volume needs at least one channel");
        }
        if data.len() != grid.len() * channels {
            return invalid(format!(
                "volume raster length {} does not match {:?}x{channels}",
                data.len(),
                grid.dims
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("volume values must be finite");
        }
        Ok(Volume {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: Grid3, channels: usize) -> Self {
        Volume {
            grid,
            channels,
            data: vec![T::zero(); grid.len() * channels],
        }
    }

    /// Fill from a function of voxel index and channel.
    pub fn from_fn(
        grid: Grid3,
        channels: usize,
        mut f: impl FnMut([usize; 3], usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(grid.len() * channels);
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    for c in 0..channels {
                        data.push(T::of(f([i, j, k], c)));
                    }
                }
            }
        }
        Volume {
            grid,
            channels,
            data,
        }
    }

    /// Stack equally sized images along z.
    pub fn from_slices(grid: Grid3, slices: &[Image<T>]) -> Result<Self> {
        if slices.len() != grid.dims[2] {
            return invalid("slice count does not match grid depth");
        }
        let channels = slices.first().map(|s| s.channels()).unwrap_or(1);
        let mut data = Vec::with_capacity(grid.len() * channels);
        for s in slices {
            if s.width() != grid.dims[0] || s.height() != grid.dims[1] || s.channels() != channels {
                return Err(Error::GridMismatch(
                    "slice does not match the volume plane".into(),
                ));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Volume {
            grid,
            channels,
            data,
        })
    }

    #[inline]
    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn voxel_size(&self) -> [f64; 3] {
        self.grid.voxel_size()
    }
    pub fn grid_to_world(&self) -> &Mat4 {
        &self.grid.grid_to_world
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> T {
        self.data[self.grid.index(i, j, k) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, c: usize, v: T) {
        let idx = self.grid.index(i, j, k) * self.channels + c;
        self.data[idx] = v;
    }

    /// Slice `k` as an image with the in-plane voxel size of axis 0.
    pub fn slice(&self, k: usize) -> Image<T> {
        let plane = self.grid.dims[0] * self.grid.dims[1] * self.channels;
        let vs = self.voxel_size();
        let grid = Grid2 {
            width: self.grid.dims[0],
            height: self.grid.dims[1],
            pixel_size: vs[0],
        };
        Image::from_raw(
            grid,
            self.channels,
            self.data[k * plane..(k + 1) * plane].to_vec(),
        )
    }

    pub fn channel(&self, c: usize) -> Volume<T> {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Volume {
            grid: self.grid,
            channels: 1,
            data,
        }
    }

    pub fn with_grid(mut self, grid: Grid3) -> Result<Self> {
        if grid.dims != self.grid.dims {
            return Err(Error::GridMismatch(
                "replacement grid has different dimensions".into(),
            ));
        }
        Grid3::new(grid.dims, grid.grid_to_world)?;
        self.grid = grid;
        Ok(self)
    }

    pub fn convert<U: Real>(&self) -> Volume<U> {
        Volume {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume<T> {
        Volume {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|v| T::of(f(v.as_f64()))).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub(crate) fn from_raw(grid: Grid3, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), grid.len() * channels);
        Volume {
            grid,
            channels,
            data,
        }
    }
}

pub(crate) fn check_same_grid3(a: &Grid3, b: &Grid3, what: &str) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let g = Grid3::centered([4, 3, 2], [1.0, 1.0, 2.0]).unwrap();
        for idx in 0..g.len() {
            let [i, j, k] = g.ijk(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
        assert_eq!(g.voxel_size(), [1.0, 1.0, 2.0]);
        assert_eq!(g.world([1.5, 1.0, 0.5]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_singular_affine() {
        let mut m = crate::linalg::IDENTITY4;
        m[2][2] = 0.0;
        assert!(Grid3::new([2, 2, 2], m).is_err());
    }

    #[test]
    fn stack_grid_matches_plane_convention() {
        let plane = Grid2::new(5, 4, 0.5).unwrap();
        let g = Grid3::stack(plane, 3, 4.0).unwrap();
        let w = g.world([3.0, 1.0, 2.0]);
        let p = plane.to_mm(3.0, 1.0);
        assert_eq!([w[0], w[1]], p);
        assert_eq!(w[2], 4.0);
    }
}
