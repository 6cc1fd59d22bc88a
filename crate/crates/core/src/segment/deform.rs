use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{group_loglik, ModelData};
use super::{AtlasPrior, BrightnessModel, GmmParams};
use crate::error::{Error, Result};
use crate::interp::{trilinear, trilinear_grad};
use crate::linalg::{
    linear_part, mat3_transpose, mat3_vec, mat4_inverse, mat4_mul, mat4_point, Mat3, Mat4,
};
use crate::optim::{maximize, LbfgsConfig, Termination};
use crate::reduce::{chunked_sum, compensated_sum};
use crate::volume::{Grid3, Volume};

/// Atlas placement: an affine from atlas to volume millimetres, refined by a
/// displacement field interpolated trilinearly from a regular control grid
/// in volume space. A volume point `p` reads the atlas at
/// `affine⁻¹(p + u(p))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationState {
    pub affine: Mat4,
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
    /// Control displacements in millimetres, x fastest.
    pub displacements: Vec<[f64; 3]>,
    /// Weight of the squared neighbour differences. Infinite freezes the
    /// displacements.
    #[serde(with = "stiffness_serde")]
    pub stiffness: f64,
}

mod stiffness_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad stiffness {t:?}"))),
        }
    }
}

impl DeformationState {
    /// Zero displacements on a grid covering `volume`'s bounding box.
    pub fn new(affine: Mat4, volume: &Grid3, spacing: f64, stiffness: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidInput(
                "control spacing must be positive".into(),
            ));
        }
        if !(stiffness >= 0.0) {
            return Err(Error::InvalidInput("stiffness must be non-negative".into()));
        }
        mat4_inverse(&affine).ok_or(Error::NonInvertible)?;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for corner in 0..8 {
            let ijk = [0, 1, 2].map(|a| {
                if corner >> a & 1 == 1 {
                    (volume.dims[a] - 1) as f64
                } else {
                    0.0
                }
            });
            let w = volume.world(ijk);
            for a in 0..3 {
                lo[a] = lo[a].min(w[a]);
                hi[a] = hi[a].max(w[a]);
            }
        }
        let dims =
            [0, 1, 2].map(|a| (((hi[a] - lo[a]) / spacing - 1e-9).ceil() as usize + 1).max(2));
        Ok(DeformationState {
            affine,
            origin: lo,
            spacing,
            dims,
            displacements: vec![[0.0; 3]; dims[0] * dims[1] * dims[2]],
            stiffness,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.displacements.len() != self.dims.iter().product::<usize>() {
            return Err(Error::InvalidInput(
                "displacement count does not match the control grid".into(),
            ));
        }
        if self.displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite control displacement".into()));
        }
        if !(self.stiffness >= 0.0) || !(self.spacing > 0.0) {
            return Err(Error::InvalidInput("bad deformation settings".into()));
        }
        mat4_inverse(&self.affine).ok_or(Error::NonInvertible)?;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.stiffness.is_infinite()
    }

    /// Cell base index and fractional offsets of world point `p`; points
    /// beyond the grid take the value at its border.
    #[inline]
    fn locate(&self, p: [f64; 3]) -> (usize, [f64; 3]) {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.spacing).clamp(0.0, (self.dims[a] - 1) as f64);
            let c = (t.floor() as usize).min(self.dims[a] - 2);
            cell[a] = c;
            frac[a] = t - c as f64;
        }
        (
            (cell[2] * self.dims[1] + cell[1]) * self.dims[0] + cell[0],
            frac,
        )
    }

    /// Offsets of the eight cell corners from the base index with their
    /// trilinear weights.
    #[inline]
    fn corners(&self, frac: [f64; 3]) -> [(usize, f64); 8] {
        let (nx, nxy) = (self.dims[0], self.dims[0] * self.dims[1]);
        let mut out = [(0, 0.0); 8];
        for (c, o) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (c & 1, c >> 1 & 1, c >> 2 & 1);
            let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
            *o = (dz * nxy + dy * nx + dx, w);
        }
        out
    }

    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let (base, frac) = self.locate(p);
        let mut u = [0.0; 3];
        for (o, w) in self.corners(frac) {
            let d = self.displacements[base + o];
            for a in 0..3 {
                u[a] += w * d[a];
            }
        }
        u
    }

    /// `Σ ‖u_a - u_b‖²` over 6-neighbour control pairs.
    pub fn penalty(&self) -> f64 {
        penalty_and_grad(&self.displacements, self.dims, None)
    }

    /// Mean displacement over the control points.
    pub fn mean_displacement(&self) -> [f64; 3] {
        let n = self.displacements.len() as f64;
        let mut m = [0.0; 3];
        for d in &self.displacements {
            for a in 0..3 {
                m[a] += d[a] / n;
            }
        }
        m
    }
}

fn penalty_and_grad(disp: &[[f64; 3]], dims: [usize; 3], mut grad: Option<&mut [f64]>) -> f64 {
    let [nx, ny, nz] = dims;
    let mut terms = Vec::with_capacity(disp.len() * 3);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let a = (k * ny + j) * nx + i;
                let nbrs = [
                    (i + 1 < nx, a + 1),
                    (j + 1 < ny, a + nx),
                    (k + 1 < nz, a + nx * ny),
                ];
                for (ok, b) in nbrs {
                    if !ok {
                        continue;
                    }
                    let mut s = 0.0;
                    for c in 0..3 {
                        let d = disp[a][c] - disp[b][c];
                        s += d * d;
                        if let Some(g) = grad.as_deref_mut() {
                            g[a * 3 + c] += 2.0 * d;
                            g[b * 3 + c] -= 2.0 * d;
                        }
                    }
                    terms.push(s);
                }
            }
        }
    }
    compensated_sum(terms)
}

/// World → continuous atlas voxel index through the affine.
fn atlas_index_map(atlas: &AtlasPrior, def: &DeformationState) -> Result<Mat4> {
    let inv = mat4_inverse(&def.affine).ok_or(Error::NonInvertible)?;
    Ok(mat4_mul(&atlas.prob.grid().world_to_grid(), &inv))
}

#[inline]
fn in_field(idx: [f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| idx[a] >= -1e-9 && idx[a] <= (dims[a] - 1) as f64 + 1e-9)
}

/// Renormalised prior of one voxel at displaced world point `q`.
fn prior_at(atlas: &AtlasPrior, map: &Mat4, q: [f64; 3], out: &mut [f64]) {
    let g = atlas.prob.grid();
    let idx = mat4_point(map, q);
    if !in_field(idx, g.dims) {
        out.fill(0.0);
        out[0] = 1.0;
        return;
    }
    let k = atlas.n_classes();
    trilinear(atlas.prob.data(), g.dims, k, idx, out);
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|v| *v /= s);
    } else {
        out.fill(0.0);
        out[0] = 1.0;
    }
}

/// Deformed atlas probabilities for every modelled voxel (`n × K`).
/// Warped prior at the voxels of `data`, `K` values per voxel.
pub fn prior_for_data(
    atlas: &AtlasPrior,
    def: &DeformationState,
    data: &ModelData,
) -> Result<Vec<f64>> {
    let map = atlas_index_map(atlas, def)?;
    let k = atlas.n_classes();
    let mut out = vec![0.0; data.len() * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let p = data.world(i);
        let u = def.displacement_at(p);
        prior_at(atlas, &map, [p[0] + u[0], p[1] + u[1], p[2] + u[2]], row);
    });
    Ok(out)
}

/// Deformed atlas probabilities on every voxel of `grid`, renormalised to
/// sum to one; voxels that map outside the atlas are background.
pub fn prior_at_voxels(
    atlas: &AtlasPrior,
    def: &DeformationState,
    grid: &Grid3,
) -> Result<Volume<f64>> {
    atlas.validate()?;
    def.validate()?;
    let map = atlas_index_map(atlas, def)?;
    let k = atlas.n_classes();
    let mut data = vec![0.0; grid.len() * k];
    data.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let p = grid.world(grid.ijk(i).map(|v| v as f64));
        let u = def.displacement_at(p);
        prior_at(atlas, &map, [p[0] + u[0], p[1] + u[1], p[2] + u[2]], row);
    });
    Volume::new(*grid, k, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub max_iterations: usize,
    pub grad_tol: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            max_iterations: 100,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformReport {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
}

/// Fixed pieces of the deformation objective.
pub struct DeformProblem<'a> {
    atlas: &'a AtlasPrior,
    def: &'a DeformationState,
    map: Mat4,
    map_lin_t: Mat3,
    world: Vec<[f64; 3]>,
    cells: Vec<(usize, [f64; 3])>,
    ll: Vec<f64>,
    class_group: Vec<usize>,
    n_groups: usize,
    /// Millimetres per optimiser unit.
    pub scale: f64,
}

impl<'a> DeformProblem<'a> {
    pub fn new(
        data: &ModelData,
        atlas: &'a AtlasPrior,
        def: &'a DeformationState,
        gmm: &GmmParams,
        field: &BrightnessModel,
    ) -> Result<Self> {
        def.validate()?;
        let map = atlas_index_map(atlas, def)?;
        let world: Vec<[f64; 3]> = (0..data.len()).map(|i| data.world(i)).collect();
        let cells = world.iter().map(|p| def.locate(*p)).collect();
        let vs = data.grid.voxel_size();
        Ok(DeformProblem {
            atlas,
            def,
            map,
            map_lin_t: mat3_transpose(&linear_part(&map)),
            world,
            cells,
            ll: group_loglik(data, gmm, field)?,
            class_group: gmm.class_group.clone(),
            n_groups: gmm.groups.len(),
            scale: (vs[0] * vs[1] * vs[2]).cbrt(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.def.displacements.len() * 3
    }

    pub fn pack(&self, disp: &[[f64; 3]]) -> Vec<f64> {
        disp.iter().flatten().map(|v| v / self.scale).collect()
    }

    pub fn unpack(&self, x: &[f64]) -> Vec<[f64; 3]> {
        x.chunks(3)
            .map(|c| [c[0] * self.scale, c[1] * self.scale, c[2] * self.scale])
            .collect()
    }

    /// Data term minus penalty, and its gradient, in optimiser units.
    pub fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let disp = self.unpack(x);
        let k = self.atlas.n_classes();
        let ng = self.n_groups;
        let gdims = self.atlas.prob.grid().dims;
        let n = self.world.len();
        let np = disp.len() * 3;

        let voxel =
            |i: usize, acc: Option<&mut [f64]>, pk: &mut [f64], dpk: &mut [[f64; 3]]| -> f64 {
                let (base, frac) = self.cells[i];
                let corners = self.def.corners(frac);
                let mut u = [0.0; 3];
                for (o, w) in corners {
                    for a in 0..3 {
                        u[a] += w * disp[base + o][a];
                    }
                }
                let p = self.world[i];
                let idx = mat4_point(&self.map, [p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
                let ll = &self.ll[i * ng..(i + 1) * ng];
                if !in_field(idx, gdims) {
                    return ll[self.class_group[0]];
                }
                trilinear_grad(self.atlas.prob.data(), gdims, k, idx, pk, dpk);
                let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = pk.iter().sum();
                let mut l = 0.0;
                for c in 0..k {
                    l += (ll[self.class_group[c]] - m).exp() * pk[c];
                }
                if !(l > 0.0) || !(s > 0.0) {
                    return 0.0;
                }
                if let Some(acc) = acc {
                    let mut gi = [0.0; 3];
                    for c in 0..k {
                        let coef = (ll[self.class_group[c]] - m).exp() / l - 1.0 / s;
                        for a in 0..3 {
                            gi[a] += coef * dpk[c][a];
                        }
                    }
                    let gw = mat3_vec(&self.map_lin_t, gi);
                    for (o, w) in corners {
                        for a in 0..3 {
                            acc[(base + o) * 3 + a] += w * gw[a];
                        }
                    }
                }
                m + l.ln() - s.ln()
            };

        // the last accumulator carries the data term
        let g = chunked_sum(n, np + 1, |r, acc| {
            let mut pk = vec![0.0; k];
            let mut dpk = vec![[0.0; 3]; k];
            let mut v = 0.0;
            for i in r {
                v += voxel(i, Some(&mut acc[..np]), &mut pk, &mut dpk);
            }
            acc[np] += v;
        });
        let data_term = g[np];
        let value = if self.def.stiffness > 0.0 {
            let mut pg = vec![0.0; np];
            let pen = penalty_and_grad(&disp, self.def.dims, Some(&mut pg));
            for (gi, (a, b)) in grad.iter_mut().zip(g.iter().zip(&pg)) {
                *gi = (a - self.def.stiffness * b) * self.scale;
            }
            data_term - self.def.stiffness * pen
        } else {
            for (gi, a) in grad.iter_mut().zip(&g) {
                *gi = a * self.scale;
            }
            data_term
        };
        value
    }
}

/// Raise the data term minus the stiffness penalty over the control
/// displacements with L-BFGS. The affine part is left as is.
pub fn optimize_deformation(
    data: &ModelData,
    atlas: &AtlasPrior,
    def: &DeformationState,
    gmm: &GmmParams,
    field: &BrightnessModel,
    cfg: &DeformConfig,
) -> Result<(DeformationState, DeformReport)> {
    if def.is_frozen() {
        return Ok((
            def.clone(),
            DeformReport {
                initial: f64::NAN,
                final_value: f64::NAN,
                iterations: 0,
                termination: None,
            },
        ));
    }
    let problem = DeformProblem::new(data, atlas, def, gmm, field)?;
    let x0 = problem.pack(&def.displacements);
    let lb = LbfgsConfig {
        max_iterations: cfg.max_iterations,
        grad_tol: cfg.grad_tol,
        ..LbfgsConfig::default()
    };
    let res = maximize(|x, g| problem.value_grad(x, g), &x0, &lb);
    if !res.f.is_finite() {
        return Err(Error::Numerical(
            "deformation objective became non-finite".into(),
        ));
    }
    let mut out = def.clone();
    out.displacements = problem.unpack(&res.x);
    let report = DeformReport {
        initial: res.trace[0],
        final_value: res.f,
        iterations: res.iterations,
        termination: Some(res.termination),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::IDENTITY4;
    use crate::segment::{LabelInfo, Mixture};

    fn labels(k: usize) -> Vec<LabelInfo> {
        (0..k)
            .map(|i| LabelInfo {
                id: i as u16,
                name: format!("c{i}"),
                gmm_group: format!("g{i}"),
            })
            .collect()
    }

    /// Smooth three-class atlas on a small grid.
    fn smooth_atlas() -> AtlasPrior {
        let g = Grid3::centered([12, 10, 8], [2.0, 2.0, 3.0]).unwrap();
        let prob = Volume::from_fn(g, 3, |[i, j, k], c| {
            let a = 1.0 + (0.5 * i as f64).sin().powi(2) + 0.2 * k as f64;
            let b = 1.0 + (0.4 * j as f64).cos().powi(2);
            let raw = [0.5, a, b];
            raw[c] / (raw[0] + a + b)
        });
        AtlasPrior::new(prob, labels(3), 6.0).unwrap()
    }

    #[test]
    fn identity_warp_reproduces_atlas() {
        let atlas = smooth_atlas();
        let g = *atlas.prob.grid();
        let def = DeformationState::new(IDENTITY4, &g, 6.0, 1.0).unwrap();
        let p = prior_at_voxels(&atlas, &def, &g).unwrap();
        for (a, b) in p.data().iter().zip(atlas.prob.data()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn outside_the_atlas_is_background() {
        let atlas = smooth_atlas();
        let g = *atlas.prob.grid();
        let mut shift = IDENTITY4;
        shift[0][3] = 1000.0;
        let def = DeformationState::new(shift, &g, 6.0, 1.0).unwrap();
        let p = prior_at_voxels(&atlas, &def, &g).unwrap();
        for v in p.data().chunks(3) {
            assert_eq!(v, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn one_voxel_shift_moves_the_boundary() {
        let g = Grid3::centered([10, 3, 3], [1.0; 3]).unwrap();
        let prob = Volume::from_fn(
            g,
            2,
            |[i, _, _], c| if (i < 5) == (c == 0) { 1.0 } else { 0.0 },
        );
        let atlas = AtlasPrior::new(prob, labels(2), 4.0).unwrap();
        let mut def = DeformationState::new(IDENTITY4, &g, 4.0, 1.0).unwrap();
        for d in &mut def.displacements {
            d[0] = 1.0;
        }
        let p = prior_at_voxels(&atlas, &def, &g).unwrap();
        // dense brute force: voxel i reads atlas voxel i + 1
        for i in 0..10 {
            let src = i + 1;
            // class 0 below i = 5 and past the grid edge
            let expect = if !(5..=9).contains(&src) { 1.0 } else { 0.0 };
            assert_eq!(p.get(i, 1, 1, 0), expect, "voxel {i}");
        }
    }

    #[test]
    fn penalty_counts_neighbour_pairs() {
        let g = Grid3::centered([5, 5, 5], [1.0; 3]).unwrap();
        let mut def = DeformationState::new(IDENTITY4, &g, 2.0, 1.0).unwrap();
        assert_eq!(def.dims, [3, 3, 3]);
        def.displacements[13] = [1.0, 0.0, 0.0];
        // centre point of 3x3x3 has six neighbours
        assert!((def.penalty() - 6.0).abs() < 1e-15);
        let uniform = DeformationState {
            displacements: vec![[2.0, -1.0, 0.5]; 27],
            ..def.clone()
        };
        assert_eq!(uniform.penalty(), 0.0);
    }

    fn problem_fixture() -> (
        ModelData,
        AtlasPrior,
        DeformationState,
        GmmParams,
        BrightnessModel,
    ) {
        let atlas = smooth_atlas();
        let g = Grid3::centered([10, 8, 6], [2.0, 2.0, 3.0]).unwrap();
        let vol: Volume<f64> = Volume::from_fn(g, 1, |[i, j, k], _| {
            -1.0 + 0.1 * ((i * 7 + j * 3 + k * 5) % 13) as f64
        });
        let mask: Volume<f64> = Volume::from_fn(g, 1, |_, _| 1.0);
        let data = ModelData::new(&vol, &mask).unwrap();
        let mut aff = IDENTITY4;
        aff[0][0] = 1.05;
        aff[1][3] = 0.7;
        let mut def = DeformationState::new(aff, &g, 6.0, 0.3).unwrap();
        for (n, d) in def.displacements.iter_mut().enumerate() {
            *d = [
                0.3 * (n as f64).sin(),
                0.2 * (n as f64 * 0.7).cos(),
                -0.25 * (n as f64 * 1.3).sin(),
            ];
        }
        let gmm = GmmParams {
            channels: 1,
            class_group: vec![0, 1, 2],
            groups: (0..3)
                .map(|c| Mixture {
                    weights: vec![1.0],
                    means: vec![vec![-0.9 + 0.3 * c as f64]],
                    covs: vec![vec![0.05]],
                })
                .collect(),
        };
        (data, atlas, def, gmm, BrightnessModel::zeros(6, 1))
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let (data, atlas, def, gmm, field) = problem_fixture();
        let problem = DeformProblem::new(&data, &atlas, &def, &gmm, &field).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..10 {
            let x: Vec<f64> = problem
                .pack(&def.displacements)
                .iter()
                .map(|v| v + rng.random_range(-0.3..0.3))
                .collect();
            let mut g = vec![0.0; problem.n_params()];
            problem.value_grad(&x, &mut g);
            let mut fd = vec![0.0; x.len()];
            let mut scratch = vec![0.0; x.len()];
            for p in 0..x.len() {
                let mut xp = x.clone();
                xp[p] += h;
                let fp = problem.value_grad(&xp, &mut scratch);
                xp[p] -= 2.0 * h;
                let fm = problem.value_grad(&xp, &mut scratch);
                fd[p] = (fp - fm) / (2.0 * h);
            }
            let num: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-4, "relative error {}", num / den);
        }
    }

    #[test]
    fn infinite_stiffness_freezes() {
        let (data, atlas, mut def, gmm, field) = problem_fixture();
        def.displacements.iter_mut().for_each(|d| *d = [0.0; 3]);
        def.stiffness = f64::INFINITY;
        let (out, _) =
            optimize_deformation(&data, &atlas, &def, &gmm, &field, &DeformConfig::default())
                .unwrap();
        assert!(out.displacements.iter().all(|d| *d == [0.0; 3]));
        let json = serde_json::to_string(&out).unwrap();
        let back: DeformationState = serde_json::from_str(&json).unwrap();
        assert!(back.stiffness.is_infinite());
    }

    #[test]
    fn optimisation_does_not_decrease_objective() {
        let (data, atlas, def, gmm, field) = problem_fixture();
        let (_, rep) = optimize_deformation(
            &data,
            &atlas,
            &def,
            &gmm,
            &field,
            &DeformConfig {
                max_iterations: 15,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.final_value >= rep.initial);
    }
}
