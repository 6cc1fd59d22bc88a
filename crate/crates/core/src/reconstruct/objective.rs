use rayon::prelude::*;

use super::{Level, ReconWeights, ReferenceMode, ReferenceVolume, TransformSet};
use crate::error::{Error, Result};
use crate::image::Grid2;
use crate::interp::{bilinear_grad, trilinear_grad};
use crate::linalg::{mat3_transpose, mat3_vec, Mat3};
use crate::metrics::{
    dice_partials, log_area_penalty, log_area_penalty_grad, ncc_partials, NccSums,
};
use crate::preprocess::SliceStack;
use crate::resample::{antialias_factor, box_blur_image, box_blur_mask, box_blur_volume};
use crate::scalar::Real;
use crate::transform::{Affine2D, Rigid3DScale};
use crate::volume::Volume;

/// Objective value split into its terms (already weighted).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms {
    pub value: f64,
    pub reference_dice: f64,
    pub ncc: Vec<f64>,
    pub pair_dice: Vec<f64>,
    pub penalty: f64,
}

/// The objective at one level and one resolution, with its parameter
/// packing. Slices, masks and the reference are box-filtered by `factor`
/// and the stack is sampled on a grid `factor` times coarser.
#[derive(Debug, Clone)]
pub struct ReconProblem {
    level: Level,
    optimize_z: bool,
    /// z scale used when it is not a parameter.
    fixed_z: f64,
    weights: ReconWeights,
    n: usize,
    ch: usize,
    src_grid: Grid2,
    out_grid: Grid2,
    thickness: f64,
    images: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    reference: Volume<f64>,
    ref_lin: Mat3,
    ref_off: [f64; 3],
    scales: Vec<f64>,
}

/// Per-slice resampled values and spatial derivatives on the output grid.
struct Samples {
    m: Vec<f64>,
    dm: Vec<[f64; 2]>,
    s: Vec<f64>,
    ds: Vec<[f64; 2]>,
    r: Vec<f64>,
    gq: Vec<[f64; 3]>,
}

struct PairPartials {
    ncc: f64,
    ncc_d: Vec<[f64; 6]>,
    dice: f64,
    d_ab: f64,
    d_aa: f64,
}

/// Gradient contributions of one slice: `[∂A11, ∂A12, ∂A21, ∂A22, ∂tx, ∂ty]`
/// plus the reference-side accumulators.
struct SliceGrad {
    phi: [f64; 6],
    m_rot: Mat3,
    h: [f64; 3],
    hz: [f64; 3],
}

const PSI_PARAMS: usize = 6;

impl ReconProblem {
    pub fn new<T: Real>(
        stack: &SliceStack<T>,
        reference: &ReferenceVolume,
        weights: ReconWeights,
        level: Level,
        factor: usize,
    ) -> Result<Self> {
        stack.validate()?;
        weights.validate()?;
        if factor == 0 {
            return Err(Error::InvalidInput(
                "resolution factor must be at least 1".into(),
            ));
        }
        let src_grid = stack.grid();
        let out_grid = src_grid.coarsen(factor);
        let images = stack
            .slices
            .iter()
            .map(|s| {
                box_blur_image(s, factor)
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect()
            })
            .collect();
        let masks = stack
            .masks
            .iter()
            .map(|m| {
                box_blur_mask(m, factor)
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect()
            })
            .collect();
        let vs = reference.volume.voxel_size();
        let ps_o = out_grid.pixel_size;
        let blurred = box_blur_volume(&reference.volume, vs.map(|v| antialias_factor(v, ps_o)));
        let w2g = reference.volume.grid().world_to_grid();
        let ref_lin = [
            [w2g[0][0], w2g[0][1], w2g[0][2]],
            [w2g[1][0], w2g[1][1], w2g[1][2]],
            [w2g[2][0], w2g[2][1], w2g[2][2]],
        ];
        let ref_off = [w2g[0][3], w2g[1][3], w2g[2][3]];
        let n = stack.len();
        // slices may change area at the affine level, which would let them
        // trade size against slice spacing, so z is only estimated rigidly
        let optimize_z = reference.mode == ReferenceMode::Hard && level == Level::Rigid;

        let half_plane = 0.5 * (src_grid.width.max(src_grid.height) as f64) * src_grid.pixel_size;
        let half_z = 0.5 * n as f64 * stack.thickness;
        let half_3d = half_plane.max(half_z);
        let mut scales = Vec::new();
        for _ in 0..n {
            match level {
                Level::Rigid => scales.extend([ps_o / half_plane, ps_o, ps_o]),
                Level::Affine => {
                    scales.extend([ps_o / half_plane; 4].into_iter().chain([ps_o, ps_o]))
                }
            }
        }
        scales.extend([ps_o / half_3d; 3]);
        scales.extend([ps_o; 3]);
        if optimize_z {
            scales.push(ps_o / half_z);
        }
        Ok(ReconProblem {
            level,
            optimize_z,
            fixed_z: 1.0,
            weights,
            n,
            ch: stack.channels(),
            src_grid,
            out_grid,
            thickness: stack.thickness,
            images,
            masks,
            reference: blurred,
            ref_lin,
            ref_off,
            scales,
        })
    }

    /// Hold the z scale at `z_scale` where it is not optimised (hard
    /// reference, affine level).
    pub fn with_z_scale(mut self, z_scale: f64) -> Result<Self> {
        if !(z_scale > 0.0 && z_scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "z scale must be positive, got {z_scale}"
            )));
        }
        self.fixed_z = z_scale;
        Ok(self)
    }

    pub fn optimizes_z_scale(&self) -> bool {
        self.optimize_z
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn output_grid(&self) -> Grid2 {
        self.out_grid
    }

    pub fn n_params(&self) -> usize {
        self.scales.len()
    }

    fn slice_params(&self) -> usize {
        match self.level {
            Level::Rigid => 3,
            Level::Affine => 6,
        }
    }

    /// Natural-unit size of one optimiser step in each parameter: roughly
    /// the motion of one output pixel.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Natural parameters: per slice `[θ, tx, ty]` (rigid) or the six affine
    /// entries, then `Ψ` angles, translation and, for a hard reference, the
    /// z scale.
    pub fn pack(&self, ts: &TransformSet) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_params());
        for phi in &ts.phis {
            let p = &phi.params;
            match self.level {
                Level::Rigid => x.extend([p[2].atan2(p[0]), p[4], p[5]]),
                Level::Affine => x.extend(p.iter().copied()),
            }
        }
        x.extend(ts.psi.angles);
        x.extend(ts.psi.translation);
        if self.optimize_z {
            x.push(ts.psi.z_scale);
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> TransformSet {
        self.unpack_with(x, self.fixed_z)
    }

    fn unpack_with(&self, x: &[f64], fixed_z: f64) -> TransformSet {
        let k = self.slice_params();
        let phis = (0..self.n)
            .map(|i| {
                let p = &x[i * k..(i + 1) * k];
                match self.level {
                    Level::Rigid => Affine2D::rigid(p[0], p[1], p[2]),
                    Level::Affine => Affine2D {
                        params: [p[0], p[1], p[2], p[3], p[4], p[5]],
                    },
                }
            })
            .collect();
        let o = self.n * k;
        let z_scale = if self.optimize_z {
            x[o + PSI_PARAMS]
        } else {
            fixed_z
        };
        let psi = Rigid3DScale {
            angles: [x[o], x[o + 1], x[o + 2]],
            translation: [x[o + 3], x[o + 4], x[o + 5]],
            z_scale,
        };
        TransformSet {
            phis,
            psi,
            level: self.level,
        }
    }

    pub fn to_scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scales).map(|(v, s)| v / s).collect()
    }

    pub fn from_scaled(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().zip(&self.scales).map(|(v, s)| v * s).collect()
    }

    /// Value and gradient in scaled parameters, for the optimiser.
    pub fn value_grad_scaled(&self, xs: &[f64], grad: &mut [f64]) -> f64 {
        let x = self.from_scaled(xs);
        let (terms, g) = self.evaluate_packed(&x, self.fixed_z);
        for ((gi, v), s) in grad.iter_mut().zip(g).zip(&self.scales) {
            *gi = v * s;
        }
        terms.value
    }

    /// Value and gradient with respect to [`ReconProblem::pack`] parameters.
    pub fn evaluate(&self, ts: &TransformSet) -> Result<(f64, Vec<f64>)> {
        let (terms, g) = self.evaluate_terms(ts)?;
        Ok((terms.value, g))
    }

    /// Like [`ReconProblem::evaluate`] but returns the individual terms and
    /// rejects a reference that does not overlap the stack at all.
    pub fn evaluate_terms(&self, ts: &TransformSet) -> Result<(ObjectiveTerms, Vec<f64>)> {
        if ts.phis.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "{} slice transforms for {} slices",
                ts.phis.len(),
                self.n
            )));
        }
        if self.level == Level::Affine {
            for p in &ts.phis {
                log_area_penalty(p)?;
            }
        }
        let x = self.pack(ts);
        let (terms, g) = self.evaluate_packed(&x, ts.psi.z_scale);
        if terms.reference_dice.is_nan() {
            return Err(Error::DegenerateOverlap);
        }
        Ok((terms, g))
    }

    /// Core evaluation. A reference with no overlap reports a NaN
    /// `reference_dice` but contributes 0 to the value.
    fn evaluate_packed(&self, x: &[f64], fixed_z: f64) -> (ObjectiveTerms, Vec<f64>) {
        let ts = self.unpack_with(x, fixed_z);
        let w = self.weights;
        let nf = self.n as f64;
        let psi = ts.psi;
        let rot = psi.rotation();
        let rot_t = mat3_transpose(&rot);

        let samples: Vec<Samples> = (0..self.n)
            .into_par_iter()
            .map(|k| self.sample(k, &ts.phis[k], &psi, &rot_t))
            .collect();

        // reference Dice over the whole stack
        let mut sums = [0.0; 3];
        for s in &samples {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (m, r) in s.m.iter().zip(&s.r) {
                ab += m * r;
                aa += m * m;
                bb += r * r;
            }
            sums[0] += ab;
            sums[1] += aa;
            sums[2] += bb;
        }
        let overlap = sums[2] > 0.0;
        let (d3, d3_ab, d3_aa) = if w.alpha > 0.0 {
            dice_partials(sums[0], sums[1], sums[2])
        } else {
            (0.0, 0.0, 0.0)
        };

        let pairs: Vec<PairPartials> = (0..self.n.saturating_sub(1))
            .into_par_iter()
            .map(|k| self.pair(&samples[k], &samples[k + 1]))
            .collect();

        let grads: Vec<SliceGrad> = (0..self.n)
            .into_par_iter()
            .map(|k| {
                let prev = (k > 0).then(|| (&samples[k - 1], &pairs[k - 1]));
                let next = (k + 1 < self.n).then(|| (&samples[k + 1], &pairs[k]));
                self.adjoint(k, &samples[k], prev, next, (d3_ab, d3_aa), &psi, &rot_t)
            })
            .collect();

        let mut penalty = 0.0;
        let mut g = vec![0.0; x.len()];
        let kp = self.slice_params();
        let mut m_rot = [[0.0; 3]; 3];
        let mut h = [0.0; 3];
        let mut hz = [0.0; 3];
        for (k, sg) in grads.iter().enumerate() {
            let mut gphi = sg.phi;
            if self.level == Level::Affine && w.nu > 0.0 {
                let phi = &ts.phis[k];
                penalty -= w.nu / nf * log_area_penalty(phi).unwrap_or(f64::INFINITY);
                let pg = log_area_penalty_grad(phi);
                for i in 0..4 {
                    gphi[i] -= w.nu / nf * pg[i];
                }
            }
            let gs = &mut g[k * kp..(k + 1) * kp];
            match self.level {
                Level::Affine => gs.copy_from_slice(&gphi),
                Level::Rigid => {
                    let (s, c) = x[k * kp].sin_cos();
                    // d/dθ of [[c, -s], [s, c]]
                    gs[0] = gphi[0] * -s + gphi[1] * -c + gphi[2] * c + gphi[3] * -s;
                    gs[1] = gphi[4];
                    gs[2] = gphi[5];
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    m_rot[i][j] += sg.m_rot[i][j];
                }
                h[i] += sg.h[i];
                hz[i] += sg.hz[i];
            }
        }
        let o = self.n * kp;
        for (a, dr) in psi.rotation_derivatives().iter().enumerate() {
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    v += dr[i][j] * m_rot[j][i];
                }
            }
            g[o + a] = v;
        }
        let rh = mat3_vec(&rot, h);
        for i in 0..3 {
            g[o + 3 + i] = -rh[i];
        }
        if self.optimize_z {
            g[o + PSI_PARAMS] = mat3_vec(&rot, hz)[2];
        }

        let ncc: Vec<f64> = pairs.iter().map(|p| w.beta / nf * p.ncc).collect();
        let pair_dice: Vec<f64> = pairs.iter().map(|p| w.gamma / nf * p.dice).collect();
        let reference_dice = w.alpha * d3;
        let value =
            reference_dice + ncc.iter().sum::<f64>() + pair_dice.iter().sum::<f64>() + penalty;
        let reference_dice = if overlap { reference_dice } else { f64::NAN };
        (
            ObjectiveTerms {
                value,
                reference_dice,
                ncc,
                pair_dice,
                penalty,
            },
            g,
        )
    }

    #[inline]
    fn slice_z(&self, k: usize) -> f64 {
        (k as f64 - (self.n as f64 - 1.0) * 0.5) * self.thickness
    }

    #[inline]
    fn reference_point(
        &self,
        p: [f64; 3],
        psi: &Rigid3DScale,
        rot_t: &Mat3,
    ) -> ([f64; 3], [f64; 3]) {
        let t = &psi.translation;
        let v = [p[0] - t[0], p[1] - t[1], psi.z_scale * p[2] - t[2]];
        let q = mat3_vec(rot_t, v);
        let l = &self.ref_lin;
        let vox = [
            l[0][0] * q[0] + l[0][1] * q[1] + l[0][2] * q[2] + self.ref_off[0],
            l[1][0] * q[0] + l[1][1] * q[1] + l[1][2] * q[2] + self.ref_off[1],
            l[2][0] * q[0] + l[2][1] * q[1] + l[2][2] * q[2] + self.ref_off[2],
        ];
        (v, vox)
    }

    fn sample(&self, k: usize, phi: &Affine2D, psi: &Rigid3DScale, rot_t: &Mat3) -> Samples {
        let og = self.out_grid;
        let sg = self.src_grid;
        let npx = og.len();
        let ch = self.ch;
        let mut out = Samples {
            m: vec![0.0; npx],
            dm: vec![[0.0; 2]; npx],
            s: vec![0.0; npx * ch],
            ds: vec![[0.0; 2]; npx * ch],
            r: vec![0.0; npx],
            gq: vec![[0.0; 3]; npx],
        };
        let p = &phi.params;
        let cs = sg.center();
        let inv_ps = 1.0 / sg.pixel_size;
        let z = self.slice_z(k);
        let rd = self.reference.dims();
        let rdata = self.reference.data();
        let (mut val, mut grad) = ([0.0; 1], [[0.0; 2]; 1]);
        let mut gv = [[0.0; 3]; 1];
        for row in 0..og.height {
            for col in 0..og.width {
                let i = row * og.width + col;
                let pm = og.to_mm(col as f64, row as f64);
                let q = [
                    p[0] * pm[0] + p[1] * pm[1] + p[4],
                    p[2] * pm[0] + p[3] * pm[1] + p[5],
                ];
                let (u, v) = (q[0] * inv_ps + cs[0], q[1] * inv_ps + cs[1]);
                bilinear_grad(
                    &self.masks[k],
                    sg.width,
                    sg.height,
                    1,
                    u,
                    v,
                    &mut val,
                    &mut grad,
                );
                out.m[i] = val[0];
                out.dm[i] = grad[0];
                bilinear_grad(
                    &self.images[k],
                    sg.width,
                    sg.height,
                    ch,
                    u,
                    v,
                    &mut out.s[i * ch..(i + 1) * ch],
                    &mut out.ds[i * ch..(i + 1) * ch],
                );
                let (_, vox) = self.reference_point([pm[0], pm[1], z], psi, rot_t);
                trilinear_grad(rdata, rd, 1, vox, &mut val, &mut gv);
                out.r[i] = val[0];
                let l = &self.ref_lin;
                let g = gv[0];
                out.gq[i] = [
                    g[0] * l[0][0] + g[1] * l[1][0] + g[2] * l[2][0],
                    g[0] * l[0][1] + g[1] * l[1][1] + g[2] * l[2][1],
                    g[0] * l[0][2] + g[1] * l[1][2] + g[2] * l[2][2],
                ];
            }
        }
        out
    }

    fn pair(&self, a: &Samples, b: &Samples) -> PairPartials {
        let ch = self.ch;
        let mut sums: Vec<NccSums> = vec![[0.0; 6]; ch];
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for i in 0..a.m.len() {
            let (ma, mb) = (a.m[i], b.m[i]);
            ab += ma * mb;
            aa += ma * ma;
            bb += mb * mb;
            let w = ma * mb;
            if w == 0.0 {
                continue;
            }
            for c in 0..ch {
                let (x, y) = (a.s[i * ch + c], b.s[i * ch + c]);
                let s = &mut sums[c];
                s[0] += w;
                s[1] += w * x;
                s[2] += w * y;
                s[3] += w * x * x;
                s[4] += w * y * y;
                s[5] += w * x * y;
            }
        }
        let mut ncc = 0.0;
        let mut ncc_d = Vec::with_capacity(ch);
        for s in &sums {
            let (r, d) = ncc_partials(s);
            ncc += r;
            ncc_d.push(d.map(|v| v / ch as f64));
        }
        let (dice, d_ab, d_aa) = dice_partials(ab, aa, bb);
        PairPartials {
            ncc: ncc / ch as f64,
            ncc_d,
            dice,
            d_ab,
            d_aa,
        }
    }

    fn adjoint(
        &self,
        k: usize,
        s: &Samples,
        prev: Option<(&Samples, &PairPartials)>,
        next: Option<(&Samples, &PairPartials)>,
        d3: (f64, f64),
        psi: &Rigid3DScale,
        rot_t: &Mat3,
    ) -> SliceGrad {
        let w = self.weights;
        let nf = self.n as f64;
        let (kb, kg) = (w.beta / nf, w.gamma / nf);
        let ch = self.ch;
        let og = self.out_grid;
        let inv_ps = 1.0 / self.src_grid.pixel_size;
        let z = self.slice_z(k);
        let mut out = SliceGrad {
            phi: [0.0; 6],
            m_rot: [[0.0; 3]; 3],
            h: [0.0; 3],
            hz: [0.0; 3],
        };
        let mut gs = vec![0.0; ch];
        for row in 0..og.height {
            for col in 0..og.width {
                let i = row * og.width + col;
                let m = s.m[i];
                let r = s.r[i];
                let mut gm = w.alpha * (d3.0 * r + d3.1 * 2.0 * m);
                let gr = w.alpha * (d3.0 * m + d3.1 * 2.0 * r);
                gs.fill(0.0);
                // this slice is `b` of the previous pair and `a` of the next
                for (other, pp, is_a) in [
                    prev.map(|(o, pp)| (o, pp, false)),
                    next.map(|(o, pp)| (o, pp, true)),
                ]
                .into_iter()
                .flatten()
                {
                    let mo = other.m[i];
                    let wgt = m * mo;
                    if wgt != 0.0 && kb != 0.0 {
                        let mut gw = 0.0;
                        for c in 0..ch {
                            let me = s.s[i * ch + c];
                            let ot = other.s[i * ch + c];
                            let (a, b) = if is_a { (me, ot) } else { (ot, me) };
                            let [d_w, d_a, d_b, d_aa, d_bb, d_ab] = pp.ncc_d[c];
                            gs[c] += kb
                                * if is_a {
                                    wgt * d_a + 2.0 * wgt * a * d_aa + wgt * b * d_ab
                                } else {
                                    wgt * d_b + 2.0 * wgt * b * d_bb + wgt * a * d_ab
                                };
                            gw += d_w
                                + a * d_a
                                + b * d_b
                                + a * a * d_aa
                                + b * b * d_bb
                                + a * b * d_ab;
                        }
                        gm += kb * gw * mo;
                    }
                    gm += kg * (pp.d_ab * mo + pp.d_aa * 2.0 * m);
                }
                let mut gu = gm * s.dm[i][0];
                let mut gv = gm * s.dm[i][1];
                for c in 0..ch {
                    gu += gs[c] * s.ds[i * ch + c][0];
                    gv += gs[c] * s.ds[i * ch + c][1];
                }
                let pm = og.to_mm(col as f64, row as f64);
                if gu != 0.0 || gv != 0.0 {
                    let gq = [gu * inv_ps, gv * inv_ps];
                    out.phi[0] += gq[0] * pm[0];
                    out.phi[1] += gq[0] * pm[1];
                    out.phi[2] += gq[1] * pm[0];
                    out.phi[3] += gq[1] * pm[1];
                    out.phi[4] += gq[0];
                    out.phi[5] += gq[1];
                }
                let g3 = s.gq[i];
                if gr != 0.0 && (g3[0] != 0.0 || g3[1] != 0.0 || g3[2] != 0.0) {
                    let (v, _) = self.reference_point([pm[0], pm[1], z], psi, rot_t);
                    for a in 0..3 {
                        let ga = gr * g3[a];
                        for b in 0..3 {
                            out.m_rot[a][b] += ga * v[b];
                        }
                        out.h[a] += ga;
                        out.hz[a] += ga * z;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Image, Mask};
    use crate::reconstruct::ReferenceMode;
    use crate::volume::Grid3;

    fn blob_stack(n: usize) -> (SliceStack<f64>, ReferenceVolume) {
        let g = Grid2::new(24, 20, 1.0).unwrap();
        let inside = |r: usize, c: usize| {
            let x = c as f64 - 11.5;
            let y = r as f64 - 9.5;
            (x * x) / 64.0 + (y * y) / 36.0 <= 1.0
        };
        let img = Image::from_fn(g, 1, |r, c, _| {
            if inside(r, c) {
                0.3 + 0.02 * c as f64
            } else {
                0.0
            }
        });
        let m = Mask::from_fn(g, |r, c| if inside(r, c) { 1.0 } else { 0.0 });
        let stack = SliceStack::new(vec![img; n], vec![m; n], 4.0).unwrap();
        let refv =
            ReferenceVolume::new(ReferenceMode::Hard, &stack.mask_volume().unwrap()).unwrap();
        (stack, refv)
    }

    #[test]
    fn aligned_identical_pair_scores_two() {
        let (stack, refv) = blob_stack(2);
        let w = ReconWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            nu: 0.0,
        };
        let p = ReconProblem::new(&stack, &refv, w, Level::Rigid, 1).unwrap();
        let (v, _) = p.evaluate(&TransformSet::identity(2)).unwrap();
        assert!((v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn rigid_level_has_no_penalty() {
        let (stack, refv) = blob_stack(3);
        let p = ReconProblem::new(&stack, &refv, ReconWeights::HARD, Level::Rigid, 1).unwrap();
        let mut ts = TransformSet::identity(3);
        ts.phis[1] = Affine2D::rigid(0.3, 1.0, -2.0);
        let (terms, _) = p.evaluate_terms(&ts).unwrap();
        assert_eq!(terms.penalty, 0.0);
    }

    #[test]
    fn disjoint_reference_leaves_pairwise_terms() {
        let (stack, _) = blob_stack(3);
        let far = Grid3::centered([4, 4, 4], [1.0; 3]).unwrap();
        let mut g2w = far.grid_to_world;
        g2w[0][3] += 500.0;
        let v: Volume<f64> = Volume::from_fn(Grid3::new([4, 4, 4], g2w).unwrap(), 1, |_, _| 1.0);
        let refv = ReferenceVolume::new(ReferenceMode::Hard, &v).unwrap();
        let p = ReconProblem::new(&stack, &refv, ReconWeights::HARD, Level::Rigid, 1).unwrap();
        let ts = TransformSet::identity(3);
        assert!(matches!(
            p.evaluate_terms(&ts),
            Err(Error::DegenerateOverlap)
        ));
        let mut g = vec![0.0; p.n_params()];
        let v = p.value_grad_scaled(&p.to_scaled(&p.pack(&ts)), &mut g);
        let expect = (1.0 + 2.0) * 2.0 / 3.0;
        assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
    }

    #[test]
    fn pack_round_trips() {
        let (stack, refv) = blob_stack(3);
        for level in [Level::Rigid, Level::Affine] {
            let p = ReconProblem::new(&stack, &refv, ReconWeights::HARD, level, 2)
                .unwrap()
                .with_z_scale(1.1)
                .unwrap();
            assert_eq!(p.optimizes_z_scale(), level == Level::Rigid);
            let mut ts = TransformSet::identity(3);
            ts.level = level;
            ts.phis[2] = Affine2D::rigid(-0.4, 3.0, 1.5);
            ts.psi = Rigid3DScale {
                angles: [0.1, -0.2, 0.05],
                translation: [1.0, 2.0, 3.0],
                z_scale: 1.1,
            };
            let back = p.unpack(&p.pack(&ts));
            for (a, b) in back.phis.iter().zip(&ts.phis) {
                for (x, y) in a.params.iter().zip(&b.params) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            assert_eq!(back.psi, ts.psi);
        }
    }

    fn smooth_problem(level: Level, mode: ReferenceMode) -> ReconProblem {
        let g = Grid2::new(30, 26, 1.0).unwrap();
        let n = 4;
        let soft = |x: f64, y: f64, z: f64| {
            let d = ((x / 9.0).powi(2) + (y / 7.0).powi(2) + (z / 9.0).powi(2)).sqrt();
            1.0 / (1.0 + ((d - 1.0) * 6.0).exp())
        };
        let mut slices: Vec<Image<f64>> = Vec::new();
        let mut masks: Vec<Mask<f64>> = Vec::new();
        for k in 0..n {
            let z = (k as f64 - 1.5) * 3.0;
            let pos = |r: usize, c: usize| g.to_mm(c as f64, r as f64);
            slices.push(Image::from_fn(g, 2, |r, c, ch| {
                let [x, y] = pos(r, c);
                soft(x, y, z) * (0.5 + 0.3 * ((x + ch as f64 * y) * 0.2).sin())
            }));
            masks.push(Mask::from_fn(g, |r, c| {
                let [x, y] = pos(r, c);
                soft(x, y, z)
            }));
        }
        let stack = SliceStack::new(slices, masks, 3.0).unwrap();
        let rg = Grid3::centered([16, 14, 10], [2.0; 3]).unwrap();
        let rv: Volume<f64> = Volume::from_fn(rg, 1, |p, _| {
            let w = rg.world([p[0] as f64, p[1] as f64, p[2] as f64]);
            soft(w[0] * 1.05 + 0.7, w[1] * 0.95 - 0.4, w[2])
        });
        let refv = ReferenceVolume::new(ReferenceMode::Soft, &rv).unwrap();
        let refv = ReferenceVolume { mode, ..refv };
        ReconProblem::new(
            &stack,
            &refv,
            ReconWeights {
                alpha: 3.0,
                beta: 1.0,
                gamma: 2.0,
                nu: 0.3,
            },
            level,
            1,
        )
        .unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (level, mode) in [
            (Level::Rigid, ReferenceMode::Hard),
            (Level::Affine, ReferenceMode::Hard),
            (Level::Affine, ReferenceMode::Soft),
        ] {
            let p = smooth_problem(level, mode);
            for _ in 0..3 {
                let mut ts = TransformSet::identity(4);
                ts.level = level;
                for phi in ts.phis.iter_mut() {
                    let mut a = Affine2D::rigid(
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    );
                    if level == Level::Affine {
                        for v in a.params[..4].iter_mut() {
                            *v += rng.random_range(-0.08..0.08);
                        }
                    }
                    *phi = a;
                }
                ts.psi = Rigid3DScale {
                    angles: [
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.2..0.2),
                    ],
                    translation: [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ],
                    z_scale: if mode == ReferenceMode::Hard {
                        rng.random_range(0.9..1.1)
                    } else {
                        1.0
                    },
                };
                let xs = p.to_scaled(&p.pack(&ts));
                let mut g = vec![0.0; xs.len()];
                p.value_grad_scaled(&xs, &mut g);
                let h = 1e-6;
                let mut fd = vec![0.0; xs.len()];
                let mut tmp = vec![0.0; xs.len()];
                for i in 0..xs.len() {
                    let mut a = xs.clone();
                    a[i] += h;
                    let fp = p.value_grad_scaled(&a, &mut tmp);
                    a[i] -= 2.0 * h;
                    let fm = p.value_grad_scaled(&a, &mut tmp);
                    fd[i] = (fp - fm) / (2.0 * h);
                }
                let diff: f64 = g
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm = g
                    .iter()
                    .map(|a| a * a)
                    .sum::<f64>()
                    .sqrt()
                    .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
                assert!(
                    diff / norm < 1e-4,
                    "{level:?} {mode:?}: rel err {}",
                    diff / norm
                );
            }
        }
    }
}
