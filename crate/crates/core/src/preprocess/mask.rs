use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{log_sum_exp, Gaussian};
use crate::image::{Image, Mask};
use crate::scalar::Real;

/// One `[x, y]` pixel click inside the tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedClick {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Side of the square window averaged around the seed.
    pub seed_window: usize,
    /// Closing radius in millimetres (5 px at 0.1 mm).
    pub closing_radius_mm: f64,
    pub em_iterations: usize,
    /// Minimum squared Mahalanobis separation of the two component means.
    pub min_separation: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            seed_window: 11,
            closing_radius_mm: 0.5,
            em_iterations: 50,
            min_separation: 1.0,
        }
    }
}

fn window_mean<T: Real>(img: &Image<T>, cx: usize, cy: usize, half: usize) -> Vec<f64> {
    let ch = img.channels();
    let mut m = vec![0.0; ch];
    let mut n = 0.0;
    for r in cy.saturating_sub(half)..=(cy + half).min(img.height() - 1) {
        for c in cx.saturating_sub(half)..=(cx + half).min(img.width() - 1) {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += img.get(r, c, k).as_f64();
            }
            n += 1.0;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn border_mean<T: Real>(img: &Image<T>) -> Vec<f64> {
    let ch = img.channels();
    let (w, h) = (img.width(), img.height());
    let mut m = vec![0.0; ch];
    let mut n = 0.0;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                for (k, mk) in m.iter_mut().enumerate() {
                    *mk += img.get(r, c, k).as_f64();
                }
                n += 1.0;
            }
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn regularized(cov: &mut [f64], d: usize) {
    let tr: f64 = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
    let eps = (1e-6 * tr).max(1e-10);
    for i in 0..d {
        cov[i * d + i] += eps;
    }
}

/// Posterior probability of the tissue (non-border) component under a two-component GMM
/// fitted by EM.
fn two_class_posterior<T: Real>(
    img: &Image<T>,
    seed_mean: Vec<f64>,
    bg_mean: Vec<f64>,
    cfg: &MaskConfig,
) -> Result<Vec<f64>> {
    let d = img.channels();
    let n = img.width() * img.height();
    let x = img.data();
    let px = |i: usize| -> Vec<f64> { (0..d).map(|k| x[i * d + k].as_f64()).collect() };

    // global covariance as the shared starting point
    let mut gm = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            gm[k] += x[i * d + k].as_f64();
        }
    }
    gm.iter_mut().for_each(|v| *v /= n as f64);
    let mut gc = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                gc[a * d + b] += (x[i * d + a].as_f64() - gm[a]) * (x[i * d + b].as_f64() - gm[b]);
            }
        }
    }
    gc.iter_mut().for_each(|v| *v /= n as f64);
    regularized(&mut gc, d);

    let mut comps = [
        Gaussian::new(seed_mean, gc.clone())?,
        Gaussian::new(bg_mean, gc)?,
    ];
    let mut weights = [0.5f64, 0.5];
    let mut post = vec![0.0; n];
    let mut prev_ll = f64::NEG_INFINITY;
    for it in 0..=cfg.em_iterations {
        let mut ll = 0.0;
        for (i, p) in post.iter_mut().enumerate() {
            let v = px(i);
            let l0 = weights[0].ln() + comps[0].log_pdf(&v);
            let l1 = weights[1].ln() + comps[1].log_pdf(&v);
            let lse = log_sum_exp(&[l0, l1]);
            *p = (l0 - lse).exp();
            ll += lse;
        }
        if it == cfg.em_iterations || (ll - prev_ll).abs() <= 1e-9 * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;
        let mut new = Vec::with_capacity(2);
        for comp in 0..2 {
            let r = |i: usize| if comp == 0 { post[i] } else { 1.0 - post[i] };
            let nk: f64 = (0..n).map(r).sum();
            if nk < 1.0 {
                new.push(comps[comp].clone());
                continue;
            }
            let mut mu = vec![0.0; d];
            for i in 0..n {
                for k in 0..d {
                    mu[k] += r(i) * x[i * d + k].as_f64();
                }
            }
            mu.iter_mut().for_each(|v| *v /= nk);
            let mut cov = vec![0.0; d * d];
            for i in 0..n {
                let ri = r(i);
                for a in 0..d {
                    for b in 0..d {
                        cov[a * d + b] +=
                            ri * (x[i * d + a].as_f64() - mu[a]) * (x[i * d + b].as_f64() - mu[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= nk);
            regularized(&mut cov, d);
            weights[comp] = nk / n as f64;
            new.push(Gaussian::new(mu, cov)?);
        }
        comps = [new[0].clone(), new[1].clone()];
        weights = [weights[0].max(1e-12), weights[1].max(1e-12)];
    }

    // separation under the pooled covariance
    let pooled: Vec<f64> = comps[0]
        .cov()
        .iter()
        .zip(comps[1].cov())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let sep = Gaussian::new(comps[0].mean().to_vec(), pooled)?.mahalanobis2(comps[1].mean());
    if sep < cfg.min_separation {
        return Err(Error::AmbiguousSeed(format!(
            "tissue and background are not separable (separation {sep:.3})"
        )));
    }
    // the background component is whichever owns the image border
    let (w, h) = (img.width(), img.height());
    let (mut border, mut nb) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                border += post[r * w + c];
                nb += 1.0;
            }
        }
    }
    if border / nb > 0.5 {
        post.iter_mut().for_each(|p| *p = 1.0 - *p);
    }
    Ok(post)
}

/// 4-connected component of `fg` containing `seed`.
fn component(fg: &[bool], w: usize, h: usize, seed: usize) -> Vec<bool> {
    let mut out = vec![false; fg.len()];
    if !fg[seed] {
        return out;
    }
    let mut q = VecDeque::from([seed]);
    out[seed] = true;
    while let Some(i) = q.pop_front() {
        let (r, c) = (i / w, i % w);
        let mut visit = |j: usize| {
            if fg[j] && !out[j] {
                out[j] = true;
                q.push_back(j);
            }
        };
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
    }
    out
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

/// Morphological closing with a disk; pixels outside the image count as
/// foreground during erosion so the result always contains the input.
fn close(m: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return m.to_vec();
    }
    let offs = disk_offsets(radius);
    let at = |buf: &[bool], r: isize, c: isize, outside: bool| -> bool {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            outside
        } else {
            buf[r as usize * w + c as usize]
        }
    };
    let mut dil = vec![false; m.len()];
    for r in 0..h as isize {
        for c in 0..w as isize {
            dil[r as usize * w + c as usize] =
                offs.iter().any(|&(dy, dx)| at(m, r + dy, c + dx, false));
        }
    }
    let mut ero = vec![false; m.len()];
    for r in 0..h as isize {
        for c in 0..w as isize {
            ero[r as usize * w + c as usize] =
                offs.iter().all(|&(dy, dx)| at(&dil, r + dy, c + dx, true));
        }
    }
    ero
}

/// Fill background regions not connected to the image border.
fn fill_holes(m: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; m.len()];
    let mut q = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !m[i] {
                outside[i] = true;
                q.push_back(i);
            }
        }
    }
    while let Some(i) = q.pop_front() {
        let (r, c) = (i / w, i % w);
        let nbrs = [
            (c > 0).then(|| i - 1),
            (c + 1 < w).then(|| i + 1),
            (r > 0).then(|| i - w),
            (r + 1 < h).then(|| i + w),
        ];
        for j in nbrs.into_iter().flatten() {
            if !m[j] && !outside[j] {
                outside[j] = true;
                q.push_back(j);
            }
        }
    }
    outside.iter().map(|o| !o).collect()
}

/// Foreground mask of one photograph from a single seed click: two-class
/// GMM, connected component of the seed, closing and hole filling.
pub fn extract_mask<T: Real>(
    photo: &Image<T>,
    seed: SeedClick,
    cfg: &MaskConfig,
) -> Result<Mask<T>> {
    let (w, h) = (photo.width(), photo.height());
    if !(seed.x >= 0.0 && seed.y >= 0.0 && seed.x < w as f64 && seed.y < h as f64) {
        return Err(Error::InvalidInput(format!(
            "seed ({}, {}) lies outside the {w}x{h} photograph",
            seed.x, seed.y
        )));
    }
    let (sx, sy) = (seed.x.floor() as usize, seed.y.floor() as usize);
    let seed_mean = window_mean(photo, sx, sy, cfg.seed_window / 2);
    let bg_mean = border_mean(photo);
    let post = two_class_posterior(photo, seed_mean, bg_mean, cfg)?;
    let seed_idx = sy * w + sx;
    if !(post[seed_idx] > 0.5) {
        return Err(Error::AmbiguousSeed(
            "seed pixel was classified as background".into(),
        ));
    }
    let fg: Vec<bool> = post.iter().map(|&p| p > 0.5).collect();
    let comp = component(&fg, w, h, seed_idx);
    let radius = (cfg.closing_radius_mm / photo.pixel_size()).round() as usize;
    let closed = close(&comp, w, h, radius);
    let comp = component(&closed, w, h, seed_idx);
    let filled = fill_holes(&comp, w, h);
    let data = filled
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    Mask::new(w, h, photo.pixel_size(), data)
}
