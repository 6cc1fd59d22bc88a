//! Similarity metrics, the area regulariser and centres of gravity.
//!
//! The `*_sums` / partial-derivative helpers expose each metric as a
//! function of a handful of accumulated sums so callers can back-propagate
//! per-pixel adjoints without re-deriving the algebra.

use crate::error::{Error, Result};
use crate::image::{check_same_grid, Image, Mask};
use crate::reduce::chunked_sum;
use crate::scalar::Real;
use crate::transform::Affine2D;
use crate::volume::{check_same_grid3, Volume};

pub const DICE_EPS: f64 = 1e-8;
pub const NCC_VAR_EPS: f64 = 1e-12;

/// Soft Dice from `Σab`, `Σa²`, `Σb²`.
#[inline]
pub fn dice_from_sums(ab: f64, aa: f64, bb: f64) -> f64 {
    2.0 * ab / (aa + bb + DICE_EPS)
}

/// Value and partials `(∂/∂Σab, ∂/∂Σa², ∂/∂Σb²)`; the last two coincide.
#[inline]
pub fn dice_partials(ab: f64, aa: f64, bb: f64) -> (f64, f64, f64) {
    let den = aa + bb + DICE_EPS;
    let d = 2.0 * ab / den;
    (d, 2.0 / den, -d / den)
}

fn dice_sums<A: Real, B: Real>(a: &[A], b: &[B]) -> [f64; 3] {
    let s = chunked_sum(a.len(), 3, |r, acc| {
        for i in r {
            let (x, y) = (a[i].as_f64(), b[i].as_f64());
            acc[0] += x * y;
            acc[1] += x * x;
            acc[2] += y * y;
        }
    });
    [s[0], s[1], s[2]]
}

/// `2·Σab / (Σa² + Σb² + ε)` over raw values.
pub fn soft_dice_values<A: Real, B: Real>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let [ab, aa, bb] = dice_sums(a, b);
    Ok(dice_from_sums(ab, aa, bb))
}

pub fn soft_dice<T: Real>(a: &Mask<T>, b: &Mask<T>) -> Result<f64> {
    check_same_grid(a.grid(), b.grid(), "soft dice")?;
    soft_dice_values(a.data(), b.data())
}

pub fn soft_dice_volume<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<f64> {
    check_same_grid3(a.grid(), b.grid(), "soft dice")?;
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::InvalidInput(
            "soft dice needs single-channel volumes".into(),
        ));
    }
    soft_dice_values(a.data(), b.data())
}

/// Accumulated sums of a weighted NCC for one channel:
/// `[Σw, Σwa, Σwb, Σwa², Σwb², Σwab]`.
pub type NccSums = [f64; 6];

/// Weighted zero-mean NCC and its partials with respect to the six sums.
/// Returns zeros when either weighted variance falls below the guard.
pub fn ncc_partials(s: &NccSums) -> (f64, [f64; 6]) {
    let [w, a, b, aa, bb, ab] = *s;
    if !(w > 0.0) {
        return (0.0, [0.0; 6]);
    }
    let (w2, w3) = (w * w, w * w * w);
    let cov = ab / w - a * b / w2;
    let va = aa / w - a * a / w2;
    let vb = bb / w - b * b / w2;
    if va < NCC_VAR_EPS || vb < NCC_VAR_EPS {
        return (0.0, [0.0; 6]);
    }
    let sq = (va * vb).sqrt();
    let r = cov / sq;
    let dr_cov = 1.0 / sq;
    let dr_va = -0.5 * r / va;
    let dr_vb = -0.5 * r / vb;
    let d_w = dr_cov * (-ab / w2 + 2.0 * a * b / w3)
        + dr_va * (-aa / w2 + 2.0 * a * a / w3)
        + dr_vb * (-bb / w2 + 2.0 * b * b / w3);
    let d_a = dr_cov * (-b / w2) + dr_va * (-2.0 * a / w2);
    let d_b = dr_cov * (-a / w2) + dr_vb * (-2.0 * b / w2);
    let d_aa = dr_va / w;
    let d_bb = dr_vb / w;
    let d_ab = dr_cov / w;
    (r, [d_w, d_a, d_b, d_aa, d_bb, d_ab])
}

/// Per-channel NCC sums over interleaved rasters.
pub fn ncc_sums<A: Real, W: Real>(a: &[A], b: &[A], w: &[W], channels: usize) -> Vec<NccSums> {
    let n = w.len();
    let flat = chunked_sum(n, 6 * channels, |r, acc| {
        for i in r {
            let wi = w[i].as_f64();
            if wi == 0.0 {
                continue;
            }
            for c in 0..channels {
                let (x, y) = (a[i * channels + c].as_f64(), b[i * channels + c].as_f64());
                let s = &mut acc[6 * c..6 * c + 6];
                s[0] += wi;
                s[1] += wi * x;
                s[2] += wi * y;
                s[3] += wi * x * x;
                s[4] += wi * y * y;
                s[5] += wi * x * y;
            }
        }
    });
    flat.chunks(6)
        .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
        .collect()
}

/// Weighted NCC averaged over channels, in `[-1, 1]`.
pub fn ncc<T: Real>(a: &Image<T>, b: &Image<T>, weight: &Mask<T>) -> Result<f64> {
    check_same_grid(a.grid(), b.grid(), "ncc images")?;
    check_same_grid(a.grid(), weight.grid(), "ncc weight")?;
    if a.channels() != b.channels() {
        return Err(Error::GridMismatch(
            "ncc images differ in channel count".into(),
        ));
    }
    let ch = a.channels();
    let sums = ncc_sums(a.data(), b.data(), weight.data(), ch);
    let total: f64 = sums.iter().map(|s| ncc_partials(s).0).sum();
    Ok((total / ch as f64).clamp(-1.0, 1.0))
}

/// `|log |det L||` for the linear part `L` of `t`.
pub fn log_area_penalty(t: &Affine2D) -> Result<f64> {
    let d = t.det();
    if d == 0.0 || !d.is_finite() {
        return Err(Error::NonInvertible);
    }
    Ok(d.abs().ln().abs())
}

/// Gradient of [`log_area_penalty`] with respect to `a11, a12, a21, a22`.
/// Uses the zero subgradient at `|det| = 1`.
pub fn log_area_penalty_grad(t: &Affine2D) -> [f64; 4] {
    let p = &t.params;
    let d = t.det();
    let l = d.abs().ln();
    let s = if l > 0.0 {
        1.0
    } else if l < 0.0 {
        -1.0
    } else {
        0.0
    };
    [s * p[3] / d, -s * p[2] / d, -s * p[1] / d, s * p[0] / d]
}

/// Intensity-weighted centroid in centred millimetres `[x, y]`.
pub fn center_of_gravity_2d<T: Real>(m: &Mask<T>) -> Result<[f64; 2]> {
    let w = m.width();
    let s = chunked_sum(m.data().len(), 3, |r, acc| {
        for i in r {
            let v = m.data()[i].as_f64();
            acc[0] += v;
            acc[1] += v * (i % w) as f64;
            acc[2] += v * (i / w) as f64;
        }
    });
    if !(s[0] > 0.0) {
        return Err(Error::EmptyMask("mask has no mass".into()));
    }
    Ok(m.grid().to_mm(s[1] / s[0], s[2] / s[0]))
}

/// Intensity-weighted centroid of channel 0 in world millimetres.
pub fn center_of_gravity_3d<T: Real>(v: &Volume<T>) -> Result<[f64; 3]> {
    let g = *v.grid();
    let ch = v.channels();
    let data = v.data();
    let s = chunked_sum(g.len(), 4, |r, acc| {
        for idx in r {
            let x = data[idx * ch].as_f64();
            if x == 0.0 {
                continue;
            }
            let [i, j, k] = g.ijk(idx);
            acc[0] += x;
            acc[1] += x * i as f64;
            acc[2] += x * j as f64;
            acc[3] += x * k as f64;
        }
    });
    if !(s[0] > 0.0) {
        return Err(Error::EmptyMask("volume has no mass".into()));
    }
    Ok(g.world([s[1] / s[0], s[2] / s[0], s[3] / s[0]]))
}
