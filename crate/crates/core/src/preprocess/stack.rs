use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_same_grid, Grid2, Image, Mask};
use crate::metrics::center_of_gravity_2d;
use crate::resample::{
    antialias_factor, box_blur_image, box_blur_mask, resample_mask, resample_slice,
};
use crate::scalar::Real;
use crate::transform::Affine2D;
use crate::volume::{Grid3, Volume};

/// Fractional margin added around the largest mask bounding box.
pub const STACK_MARGIN: f64 = 0.2;

/// Anatomical direction in which stored slice index increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackDirection {
    #[default]
    AnteriorToPosterior,
    PosteriorToAnterior,
}

/// Ordered slices and masks on one common grid.
#[derive(Debug, Clone)]
pub struct SliceStack<T> {
    pub slices: Vec<Image<T>>,
    pub masks: Vec<Mask<T>>,
    /// Nominal slice thickness in millimetres.
    pub thickness: f64,
    /// `order[i]` is the input index of stored slice `i`.
    pub order: Vec<usize>,
    pub direction: StackDirection,
}

impl<T: Real> SliceStack<T> {
    /// Assemble a stack from slices that already share a grid.
    pub fn new(slices: Vec<Image<T>>, masks: Vec<Mask<T>>, thickness: f64) -> Result<Self> {
        let order = (0..slices.len()).collect();
        let s = SliceStack {
            slices,
            masks,
            thickness,
            order,
            direction: StackDirection::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.slices.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "a stack needs at least 2 slices, got {n}"
            )));
        }
        if self.masks.len() != n {
            return Err(Error::InvalidInput(format!(
                "{n} slices but {} masks",
                self.masks.len()
            )));
        }
        if !(self.thickness > 0.0 && self.thickness.is_finite()) {
            return Err(Error::InvalidInput(
                "slice thickness must be positive".into(),
            ));
        }
        check_permutation(&self.order, n)?;
        let g = self.slices[0].grid();
        let ch = self.slices[0].channels();
        for (i, (s, m)) in self.slices.iter().zip(&self.masks).enumerate() {
            check_same_grid(g, s.grid(), &format!("slice {i}"))?;
            check_same_grid(g, m.grid(), &format!("mask {i}"))?;
            if s.channels() != ch {
                return Err(Error::InvalidInput(format!(
                    "slice {i} has {} channels, expected {ch}",
                    s.channels()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn grid(&self) -> Grid2 {
        self.slices[0].grid()
    }

    pub fn pixel_size(&self) -> f64 {
        self.grid().pixel_size
    }

    pub fn channels(&self) -> usize {
        self.slices[0].channels()
    }

    /// Grid of the naive stacked volume: centred in-plane, slice `k` at
    /// `z = (k - (n-1)/2)·thickness`.
    pub fn grid3(&self) -> Result<Grid3> {
        Grid3::stack(self.grid(), self.len(), self.thickness)
    }

    pub fn image_volume(&self) -> Result<Volume<T>> {
        Volume::from_slices(self.grid3()?, &self.slices)
    }

    pub fn mask_volume(&self) -> Result<Volume<T>> {
        let imgs: Vec<Image<T>> = self.masks.iter().map(|m| m.image().clone()).collect();
        Volume::from_slices(self.grid3()?, &imgs)
    }
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::InvalidInput(format!(
            "order has {} entries for {n} slices",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &o in order {
        if o >= n || seen[o] {
            return Err(Error::InvalidInput(format!(
                "order {order:?} is not a permutation of 0..{n}"
            )));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Resample every slice to `recon_resolution`, pad to a common grid sized
/// from the largest mask bounding box plus margin, and centre each mask's
/// centre of gravity on the grid.
pub fn build_stack<T: Real>(
    slices: &[Image<T>],
    masks: &[Mask<T>],
    order: &[usize],
    thickness: f64,
    recon_resolution: f64,
) -> Result<SliceStack<T>> {
    let n = slices.len();
    if masks.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} slices but {} masks",
            masks.len()
        )));
    }
    check_permutation(order, n)?;
    if !(recon_resolution > 0.0) {
        return Err(Error::InvalidInput(
            "reconstruction resolution must be positive".into(),
        ));
    }
    let mut extent = [0.0f64; 2];
    let mut cogs = Vec::with_capacity(n);
    for (i, (s, m)) in slices.iter().zip(masks).enumerate() {
        check_same_grid(s.grid(), m.grid(), &format!("mask {i}"))?;
        let bb = m
            .bounding_box(0.5)
            .ok_or_else(|| Error::EmptyMask(format!("mask of slice {i} is empty")))?;
        let scale = m.pixel_size() / recon_resolution;
        extent[0] = extent[0].max((bb.3 - bb.2 + 1) as f64 * scale);
        extent[1] = extent[1].max((bb.1 - bb.0 + 1) as f64 * scale);
        cogs.push(
            center_of_gravity_2d(m)
                .map_err(|_| Error::EmptyMask(format!("mask of slice {i} is empty")))?,
        );
    }
    let size = |e: f64| (((1.0 + STACK_MARGIN) * e - 1e-9).ceil() as usize).max(1);
    let grid = Grid2::new(size(extent[0]), size(extent[1]), recon_resolution)?;

    let placed: Vec<(Image<T>, Mask<T>)> = order
        .par_iter()
        .map(|&i| {
            let t = Affine2D::translation(cogs[i][0], cogs[i][1]);
            let f = antialias_factor(slices[i].pixel_size(), recon_resolution);
            let img = resample_slice(&box_blur_image(&slices[i], f), &t, grid)?;
            let mask = resample_mask(&box_blur_mask(&masks[i], f), &t, grid)?;
            if mask.sum() <= 0.0 {
                return Err(Error::EmptyMask(format!(
                    "mask of slice {i} vanished on resampling"
                )));
            }
            Ok((img, mask))
        })
        .collect::<Result<_>>()?;
    let (slices, masks) = placed.into_iter().unzip();
    let stack = SliceStack {
        slices,
        masks,
        thickness,
        order: order.to_vec(),
        direction: StackDirection::default(),
    };
    stack.validate()?;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(
        w: usize,
        h: usize,
        c0: usize,
        r0: usize,
        cw: usize,
        rh: usize,
        ps: f64,
    ) -> (Image<f64>, Mask<f64>) {
        let g = Grid2::new(w, h, ps).unwrap();
        let inside = |r: usize, c: usize| r >= r0 && r < r0 + rh && c >= c0 && c < c0 + cw;
        let img = Image::from_fn(g, 3, |r, c, k| {
            if inside(r, c) {
                0.5 + 0.1 * k as f64
            } else {
                0.0
            }
        });
        let m = Mask::from_fn(g, |r, c| if inside(r, c) { 1.0 } else { 0.0 });
        (img, m)
    }

    #[test]
    fn grid_width_is_padded_largest_box() {
        let (a, ma) = rect(200, 150, 10, 20, 80, 40, 0.5);
        let (b, mb) = rect(200, 150, 50, 30, 100, 60, 0.5);
        let s = build_stack(&[a, b], &[ma, mb], &[0, 1], 4.0, 0.5).unwrap();
        assert_eq!(s.grid().width, 120);
        assert_eq!(s.grid().height, 72);
    }

    #[test]
    fn identical_slices_are_centred() {
        let (a, ma) = rect(90, 70, 5, 8, 31, 21, 0.5);
        let s = build_stack(&[a.clone(), a], &[ma.clone(), ma], &[0, 1], 4.0, 0.5).unwrap();
        for m in &s.masks {
            let cog = center_of_gravity_2d(m).unwrap();
            assert!(cog[0].abs() < 0.25 && cog[1].abs() < 0.25, "{cog:?}");
        }
    }

    #[test]
    fn order_selects_input_slice() {
        let (a, ma) = rect(60, 60, 10, 10, 20, 20, 0.5);
        let (b, mb) = rect(60, 60, 10, 10, 30, 20, 0.5);
        let s = build_stack(&[a, b], &[ma, mb.clone()], &[1, 0], 4.0, 0.5).unwrap();
        assert_eq!(s.order, vec![1, 0]);
        assert!((s.masks[0].sum() - mb.sum()).abs() < 1e-9);
    }

    #[test]
    fn grid_ignores_input_order() {
        let (a, ma) = rect(120, 90, 4, 7, 37, 50, 0.5);
        let (b, mb) = rect(120, 90, 30, 2, 61, 33, 0.5);
        let (c, mc) = rect(120, 90, 0, 0, 20, 80, 0.5);
        let s1 = build_stack(
            &[a.clone(), b.clone(), c.clone()],
            &[ma.clone(), mb.clone(), mc.clone()],
            &[0, 1, 2],
            4.0,
            0.5,
        )
        .unwrap();
        let s2 = build_stack(&[c, a, b], &[mc, ma, mb], &[2, 0, 1], 4.0, 0.5).unwrap();
        assert_eq!(s1.grid(), s2.grid());
    }

    #[test]
    fn empty_mask_names_the_slice() {
        let (a, ma) = rect(40, 40, 5, 5, 10, 10, 0.5);
        let (b, _) = rect(40, 40, 5, 5, 10, 10, 0.5);
        let mb = Mask::zeros(b.grid());
        match build_stack(&[a, b], &[ma, mb], &[0, 1], 4.0, 0.5) {
            Err(Error::EmptyMask(msg)) => assert!(msg.contains("slice 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_order_rejected() {
        let (a, ma) = rect(40, 40, 5, 5, 10, 10, 0.5);
        let e = build_stack(&[a.clone(), a], &[ma.clone(), ma], &[0, 0], 4.0, 0.5);
        assert!(matches!(e, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn resampling_to_coarser_grid_scales_extent() {
        let (a, ma) = rect(400, 300, 100, 100, 200, 100, 0.1);
        let s = build_stack(&[a.clone(), a], &[ma.clone(), ma], &[0, 1], 4.0, 0.5).unwrap();
        assert_eq!(s.grid().width, 48);
        assert_eq!(s.grid().height, 24);
        assert!((s.masks[0].sum() * 0.25 - 200.0 * 100.0 * 0.01).abs() < 2.0);
    }
}
