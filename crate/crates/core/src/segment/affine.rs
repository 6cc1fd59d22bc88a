use serde::{Deserialize, Serialize};

use super::AtlasPrior;
use crate::error::{Error, Result};
use crate::interp::trilinear_grad;
use crate::linalg::{
    from_linear_translation, linear_part, mat3_mul, mat3_vec, mat4_inverse, mat4_point,
    sym_sqrt_pair, Mat3, Mat4,
};
use crate::metrics::dice_partials;
use crate::optim::{maximize, LbfgsConfig};
use crate::reduce::chunked_sum;
use crate::resample::{antialias_factor, box_blur_volume};
use crate::scalar::Real;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineInitConfig {
    /// Coarse-to-fine sampling factors relative to the finest voxel size.
    pub factors: Vec<usize>,
    pub lbfgs: LbfgsConfig,
}

impl Default for AffineInitConfig {
    fn default() -> Self {
        AffineInitConfig {
            factors: vec![4, 2, 1],
            lbfgs: LbfgsConfig {
                max_iterations: 200,
                ..LbfgsConfig::default()
            },
        }
    }
}

/// Weighted centroid and covariance of a single-channel volume in world
/// millimetres.
fn moments(v: &Volume<f64>) -> Option<([f64; 3], Mat3)> {
    let g = *v.grid();
    let s = chunked_sum(g.len(), 10, |r, acc| {
        for i in r {
            let w = v.data()[i];
            if w == 0.0 {
                continue;
            }
            let p = g.world(g.ijk(i).map(|x| x as f64));
            acc[0] += w;
            for a in 0..3 {
                acc[1 + a] += w * p[a];
            }
            acc[4] += w * p[0] * p[0];
            acc[5] += w * p[0] * p[1];
            acc[6] += w * p[0] * p[2];
            acc[7] += w * p[1] * p[1];
            acc[8] += w * p[1] * p[2];
            acc[9] += w * p[2] * p[2];
        }
    });
    if !(s[0] > 0.0) {
        return None;
    }
    let m = [s[1] / s[0], s[2] / s[0], s[3] / s[0]];
    let e = |v: f64, a: usize, b: usize| v / s[0] - m[a] * m[b];
    let (xx, xy, xz, yy, yz, zz) = (
        e(s[4], 0, 0),
        e(s[5], 0, 1),
        e(s[6], 0, 2),
        e(s[7], 1, 1),
        e(s[8], 1, 2),
        e(s[9], 2, 2),
    );
    Some((m, [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]))
}

/// Sampled voxels of the target at one resolution and the blurred atlas
/// tissue map they are compared with.
struct Level {
    points: Vec<[f64; 3]>,
    target: Vec<f64>,
    tissue: Volume<f64>,
    tissue_w2g: Mat4,
    /// Millimetres per optimiser unit for the translation and linear parts.
    t_scale: f64,
    b_scale: f64,
}

impl Level {
    fn new(target: &Volume<f64>, tissue: &Volume<f64>, factor: usize) -> Self {
        let g = *target.grid();
        let vs = g.voxel_size();
        let finest = vs.iter().cloned().fold(f64::INFINITY, f64::min);
        let spacing = factor as f64 * finest;
        let stride = vs.map(|v| ((spacing / v).floor() as usize).max(1));
        let blurred = box_blur_volume(target, stride);
        let mut points = Vec::new();
        let mut values = Vec::new();
        for k in (0..g.dims[2]).step_by(stride[2]) {
            for j in (0..g.dims[1]).step_by(stride[1]) {
                for i in (0..g.dims[0]).step_by(stride[0]) {
                    points.push(g.world([i as f64, j as f64, k as f64]));
                    values.push(blurred.get(i, j, k, 0));
                }
            }
        }
        let avs = tissue.voxel_size();
        let tissue = box_blur_volume(tissue, avs.map(|v| antialias_factor(v, spacing)));
        let half = (0..3)
            .map(|a| 0.5 * g.dims[a] as f64 * vs[a])
            .fold(0.0, f64::max);
        Level {
            points,
            target: values,
            tissue_w2g: tissue.grid().world_to_grid(),
            tissue,
            t_scale: spacing,
            b_scale: spacing / half,
        }
    }

    fn unpack(&self, x: &[f64]) -> (Mat3, [f64; 3]) {
        let b = [
            [
                x[0] * self.b_scale,
                x[1] * self.b_scale,
                x[2] * self.b_scale,
            ],
            [
                x[3] * self.b_scale,
                x[4] * self.b_scale,
                x[5] * self.b_scale,
            ],
            [
                x[6] * self.b_scale,
                x[7] * self.b_scale,
                x[8] * self.b_scale,
            ],
        ];
        (
            b,
            [
                x[9] * self.t_scale,
                x[10] * self.t_scale,
                x[11] * self.t_scale,
            ],
        )
    }

    fn pack(&self, b: &Mat3, c: [f64; 3]) -> Vec<f64> {
        let mut x: Vec<f64> = b.iter().flatten().map(|v| v / self.b_scale).collect();
        x.extend(c.iter().map(|v| v / self.t_scale));
        x
    }

    /// Soft Dice of target and mapped tissue, and its gradient in
    /// optimiser units.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (b, c) = self.unpack(x);
        let dims = self.tissue.grid().dims;
        let lin = linear_part(&self.tissue_w2g);
        let n = self.points.len();
        let sample = |i: usize| -> (f64, [f64; 3]) {
            let p = self.points[i];
            let q = mat3_vec(&b, p);
            let q = [q[0] + c[0], q[1] + c[1], q[2] + c[2]];
            let mut v = [0.0];
            let mut gi = [[0.0; 3]];
            trilinear_grad(
                self.tissue.data(),
                dims,
                1,
                mat4_point(&self.tissue_w2g, q),
                &mut v,
                &mut gi,
            );
            // world gradient: Lᵀ ∇_index
            let gw = [0, 1, 2]
                .map(|a| lin[0][a] * gi[0][0] + lin[1][a] * gi[0][1] + lin[2][a] * gi[0][2]);
            (v[0], gw)
        };
        let sums = chunked_sum(n, 3, |r, acc| {
            for i in r {
                let (t, _) = sample(i);
                let m = self.target[i];
                acc[0] += m * t;
                acc[1] += m * m;
                acc[2] += t * t;
            }
        });
        let (d, d_ab, d_sq) = dice_partials(sums[0], sums[1], sums[2]);
        let g = chunked_sum(n, 12, |r, acc| {
            for i in r {
                let (t, gw) = sample(i);
                let coef = d_ab * self.target[i] + d_sq * 2.0 * t;
                if coef == 0.0 {
                    continue;
                }
                let p = self.points[i];
                for row in 0..3 {
                    let gr = coef * gw[row];
                    for col in 0..3 {
                        acc[row * 3 + col] += gr * p[col];
                    }
                    acc[9 + row] += gr;
                }
            }
        });
        for k in 0..9 {
            grad[k] = g[k] * self.b_scale;
        }
        for k in 9..12 {
            grad[k] = g[k] * self.t_scale;
        }
        d
    }
}

/// Affine from atlas to volume millimetres that maximises the soft Dice of
/// the atlas tissue map (`1 - p(background)`) and `target`, a brain mask or
/// probability on the volume grid. Starts from centroid and second-moment
/// matching and refines coarse to fine.
pub fn affine_atlas_init<T: Real>(
    atlas: &AtlasPrior,
    target: &Volume<T>,
    cfg: &AffineInitConfig,
) -> Result<Mat4> {
    if target.channels() != 1 {
        return Err(Error::InvalidInput(
            "registration target must have one channel".into(),
        ));
    }
    if cfg.factors.is_empty() || cfg.factors.contains(&0) {
        return Err(Error::InvalidInput(
            "affine schedule needs positive factors".into(),
        ));
    }
    let target = target.convert::<f64>();
    let tissue = atlas.tissue();
    let (mv, cv) =
        moments(&target).ok_or_else(|| Error::EmptyMask("registration target is empty".into()))?;
    let (ma, ca) = moments(&tissue)
        .ok_or_else(|| Error::InvalidInput("atlas has no tissue probability".into()))?;
    // volume → atlas: B = Ca^½ Cv^-½, c = ma - B mv
    let (ca_half, _) = sym_sqrt_pair(&ca)
        .ok_or_else(|| Error::Numerical("atlas tissue is flat along an axis".into()))?;
    let (_, cv_inv_half) = sym_sqrt_pair(&cv)
        .ok_or_else(|| Error::Numerical("registration target is flat along an axis".into()))?;
    let mut b = mat3_mul(&ca_half, &cv_inv_half);
    let bm = mat3_vec(&b, mv);
    let mut c = [ma[0] - bm[0], ma[1] - bm[1], ma[2] - bm[2]];

    for &f in &cfg.factors {
        let level = Level::new(&target, &tissue, f);
        let x0 = level.pack(&b, c);
        let res = maximize(|x, g| level.value_grad(x, g), &x0, &cfg.lbfgs);
        if !res.f.is_finite() {
            return Err(Error::Numerical(
                "affine registration objective became non-finite".into(),
            ));
        }
        (b, c) = level.unpack(&res.x);
        log::debug!(
            "affine init 1/{f}: dice {:.5} -> {:.5} in {} iterations",
            res.trace[0],
            res.f,
            res.iterations
        );
    }
    mat4_inverse(&from_linear_translation(&b, c)).ok_or(Error::NonInvertible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::LabelInfo;
    use crate::volume::Grid3;

    fn blob_atlas() -> AtlasPrior {
        let g = Grid3::centered([40, 36, 32], [2.0; 3]).unwrap();
        let prob: Volume<f64> = Volume::from_fn(g, 2, |ijk, c| {
            let p = g.world(ijk.map(|v| v as f64));
            let r = ((p[0] / 24.0).powi(2) + ((p[1] - 3.0) / 18.0).powi(2) + (p[2] / 15.0).powi(2))
                .sqrt();
            // lopsided so orientation is identifiable
            let r = r - 0.1 * (p[0] / 24.0).max(0.0);
            let t = 1.0 / (1.0 + ((r - 1.0) * 8.0).exp());
            if c == 1 {
                t
            } else {
                1.0 - t
            }
        });
        let labels = vec![
            LabelInfo {
                id: 0,
                name: "background".into(),
                gmm_group: "background".into(),
            },
            LabelInfo {
                id: 1,
                name: "tissue".into(),
                gmm_group: "tissue".into(),
            },
        ];
        AtlasPrior::new(prob.convert(), labels, 10.0).unwrap()
    }

    /// Tissue map resampled through `volume→atlas` = `q = s·p + t`.
    fn warped_target(atlas: &AtlasPrior, s: f64, t: [f64; 3]) -> Volume<f64> {
        let tissue = atlas.tissue();
        let g = *tissue.grid();
        let w2g = g.world_to_grid();
        Volume::from_fn(g, 1, |ijk, _| {
            let p = g.world(ijk.map(|v| v as f64));
            let q = [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]];
            let mut v = [0.0];
            crate::interp::trilinear(tissue.data(), g.dims, 1, mat4_point(&w2g, q), &mut v);
            v[0]
        })
    }

    #[test]
    fn atlas_onto_itself_is_identity() {
        let atlas = blob_atlas();
        let a = affine_atlas_init(&atlas, &atlas.tissue(), &AffineInitConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((a[i][j] - e).abs() < 1e-3, "{a:?}");
            }
        }
    }

    #[test]
    fn shift_is_recovered() {
        let atlas = blob_atlas();
        // volume point p shows atlas point p - 8 x̂: the atlas moved +8 mm
        let target = warped_target(&atlas, 1.0, [-8.0, 0.0, 0.0]);
        let a = affine_atlas_init(&atlas, &target, &AffineInitConfig::default()).unwrap();
        assert!((a[0][3] - 8.0).abs() < 0.5, "{a:?}");
        assert!(a[1][3].abs() < 0.5 && a[2][3].abs() < 0.5);
    }

    #[test]
    fn scale_is_recovered() {
        let atlas = blob_atlas();
        let target = warped_target(&atlas, 1.0 / 1.1, [0.0; 3]);
        let a = affine_atlas_init(&atlas, &target, &AffineInitConfig::default()).unwrap();
        for i in 0..3 {
            assert!((a[i][i] - 1.1).abs() < 0.02, "{a:?}");
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let atlas = blob_atlas();
        let empty: Volume<f64> = Volume::zeros(*atlas.prob.grid(), 1);
        assert!(matches!(
            affine_atlas_init(&atlas, &empty, &AffineInitConfig::default()),
            Err(Error::EmptyMask(_))
        ));
    }
}
