use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{basis, BrightnessModel, GmmParams, Mixture};
use crate::error::{Error, Result};
use crate::gauss::{log_sum_exp, Gaussian};
use crate::reduce::{chunked_sum, compensated_sum};
use crate::scalar::Real;
use crate::volume::{check_same_grid3, Grid3, Volume};

/// Log intensities of the voxels that enter the model, with the slice
/// index and brightness basis of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub grid: Grid3,
    pub channels: usize,
    /// Linear voxel index of every modelled voxel, increasing.
    pub voxels: Vec<usize>,
    /// `voxels.len() × channels` log intensities.
    pub d: Vec<f64>,
    pub slice: Vec<usize>,
    pub basis: Vec<[f64; 4]>,
}

impl ModelData {
    /// Keep voxels whose mask value is at least one half.
    pub fn new<M: Real>(log_volume: &Volume<f64>, mask: &Volume<M>) -> Result<Self> {
        check_same_grid3(log_volume.grid(), mask.grid(), "segmentation mask")?;
        if mask.channels() != 1 {
            return Err(Error::InvalidInput("mask must have one channel".into()));
        }
        let grid = *log_volume.grid();
        let ch = log_volume.channels();
        let [nx, ny, _] = grid.dims;
        let voxels: Vec<usize> = (0..grid.len())
            .filter(|&i| mask.data()[i].as_f64() >= 0.5)
            .collect();
        if voxels.is_empty() {
            return Err(Error::EmptyMask(
                "segmentation mask selects no voxels".into(),
            ));
        }
        let mut d = Vec::with_capacity(voxels.len() * ch);
        let mut slice = Vec::with_capacity(voxels.len());
        let mut b = Vec::with_capacity(voxels.len());
        for &v in &voxels {
            d.extend_from_slice(&log_volume.data()[v * ch..(v + 1) * ch]);
            let [i, j, k] = grid.ijk(v);
            slice.push(k);
            b.push(basis(i, j, nx, ny));
        }
        Ok(ModelData {
            grid,
            channels: ch,
            voxels,
            d,
            slice,
            basis: b,
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn n_slices(&self) -> usize {
        self.grid.dims[2]
    }

    /// World position of modelled voxel `i`.
    pub fn world(&self, i: usize) -> [f64; 3] {
        self.grid
            .world(self.grid.ijk(self.voxels[i]).map(|v| v as f64))
    }

    /// Bias-corrected log intensity `d_i - Cφ_i`.
    #[inline]
    pub fn corrected(&self, i: usize, field: &BrightnessModel, out: &mut [f64]) {
        let ch = self.channels;
        for c in 0..ch {
            out[c] = self.d[i * ch + c] - field.value(self.slice[i], c, &self.basis[i]);
        }
    }

    /// Index ranges of the modelled voxels in each slice.
    pub fn slice_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = vec![0..0; self.n_slices()];
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.slice[i] != self.slice[start] {
                out[self.slice[start]] = start..i;
                start = i;
            }
        }
        out
    }
}

/// Flattened (group, component) view of the mixtures.
pub(crate) struct Slots {
    pub group: Vec<usize>,
    pub log_w: Vec<f64>,
    pub gauss: Vec<Gaussian>,
    /// Slot range of each group.
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl Slots {
    pub fn new(gmm: &GmmParams) -> Result<Self> {
        let mut s = Slots {
            group: Vec::new(),
            log_w: Vec::new(),
            gauss: Vec::new(),
            ranges: Vec::new(),
        };
        for (gi, m) in gmm.groups.iter().enumerate() {
            let start = s.group.len();
            for c in 0..m.len() {
                s.group.push(gi);
                s.log_w.push(m.weights[c].ln());
                s.gauss
                    .push(Gaussian::new(m.means[c].clone(), m.covs[c].clone())?);
            }
            s.ranges.push(start..s.group.len());
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }
}

/// Group prior `P_i(γ) = Σ_{k∈γ} p_i(k)` for every voxel (`n × Γ`).
pub(crate) fn group_prior(prior: &[f64], class_group: &[usize], n_groups: usize) -> Vec<f64> {
    let k = class_group.len();
    let mut out = vec![0.0; prior.len() / k * n_groups];
    for (row, p) in out.chunks_mut(n_groups).zip(prior.chunks(k)) {
        for (c, &g) in class_group.iter().enumerate() {
            row[g] += p[c];
        }
    }
    out
}

/// Per-voxel, per-group log likelihood `ln Σ_g w_g N(e_i | μ_g, Σ_g)`
/// (`n × Γ`).
pub(crate) fn group_loglik(
    data: &ModelData,
    gmm: &GmmParams,
    field: &BrightnessModel,
) -> Result<Vec<f64>> {
    let slots = Slots::new(gmm)?;
    let ng = gmm.groups.len();
    let ch = data.channels;
    let mut out = vec![0.0; data.len() * ng];
    let widest = slots.ranges.iter().map(|r| r.len()).max().unwrap_or(0);
    out.par_chunks_mut(ng).enumerate().for_each_init(
        || vec![0.0; widest],
        |t, (i, row)| {
            let mut e = [0.0; 8];
            data.corrected(i, field, &mut e);
            for (g, r) in slots.ranges.iter().enumerate() {
                let terms = &mut t[..r.len()];
                for (j, s) in r.clone().enumerate() {
                    terms[j] = slots.log_w[s] + slots.gauss[s].log_pdf(&e[..ch]);
                }
                row[g] = log_sum_exp(terms);
            }
        },
    );
    Ok(out)
}

/// Result of an E step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    pub n_slots: usize,
    /// Responsibilities over (group, component) slots, `n × slots`. Class
    /// responsibilities follow by splitting each group's share in
    /// proportion to the class priors.
    pub resp: Vec<f64>,
    /// `Σ_i ln Σ_{k,g} p_i(k) w_{k,g} N(d_i - Cφ_i | μ_{k,g}, Σ_{k,g})`.
    pub bound: f64,
    /// Voxels with no probability mass under the model.
    pub zero_mass: usize,
}

impl EStep {
    /// Posterior over classes for every voxel (`n × K`).
    pub fn class_posterior(&self, prior: &[f64], gmm: &GmmParams) -> Vec<f64> {
        let k = gmm.class_group.len();
        let ng = gmm.groups.len();
        let gp = group_prior(prior, &gmm.class_group, ng);
        let mut ranges = Vec::with_capacity(ng);
        let mut start = 0;
        for m in &gmm.groups {
            ranges.push(start..start + m.len());
            start += m.len();
        }
        let mut out = vec![0.0; prior.len()];
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
            let q = &self.resp[i * self.n_slots..(i + 1) * self.n_slots];
            for c in 0..k {
                let g = gmm.class_group[c];
                let pg = gp[i * ng + g];
                if pg > 0.0 {
                    row[c] = q[ranges[g].clone()].iter().sum::<f64>() * prior[i * k + c] / pg;
                }
            }
        });
        out
    }
}

/// Responsibilities and the log-likelihood bound. `prior` is `n × K`.
pub fn e_step(
    data: &ModelData,
    prior: &[f64],
    gmm: &GmmParams,
    field: &BrightnessModel,
) -> Result<EStep> {
    let k = gmm.class_group.len();
    if prior.len() != data.len() * k {
        return Err(Error::InvalidInput(format!(
            "prior has {} values for {} voxels × {} classes",
            prior.len(),
            data.len(),
            k
        )));
    }
    if gmm.channels != data.channels
        || field.channels != data.channels
        || field.n_slices != data.n_slices()
    {
        return Err(Error::InvalidInput(
            "model parameters do not match the data".into(),
        ));
    }
    let slots = Slots::new(gmm)?;
    let ns = slots.len();
    let ng = gmm.groups.len();
    let gp = group_prior(prior, &gmm.class_group, ng);
    let ch = data.channels;
    let mut resp = vec![0.0; data.len() * ns];
    let mut lse = vec![0.0; data.len()];
    resp.par_chunks_mut(ns)
        .zip(lse.par_iter_mut())
        .enumerate()
        .for_each(|(i, (row, out))| {
            let mut e = [0.0; 8];
            data.corrected(i, field, &mut e);
            for s in 0..ns {
                let p = gp[i * ng + slots.group[s]];
                row[s] = if p > 0.0 {
                    p.ln() + slots.log_w[s] + slots.gauss[s].log_pdf(&e[..ch])
                } else {
                    f64::NEG_INFINITY
                };
            }
            let l = log_sum_exp(row);
            if l.is_finite() {
                for v in row.iter_mut() {
                    *v = (*v - l).exp();
                }
                *out = l;
            } else {
                row.fill(1.0 / ns as f64);
                *out = f64::NAN;
            }
        });
    let zero_mass = lse.iter().filter(|v| v.is_nan()).count();
    let bound = compensated_sum(lse.iter().map(|v| if v.is_nan() { 0.0 } else { *v }));
    Ok(EStep {
        n_slots: ns,
        resp,
        bound,
        zero_mass,
    })
}

/// Guards and options of the mixture update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmUpdate {
    /// Groups with less total responsibility keep their parameters.
    pub min_group_mass: f64,
    /// Components with less responsibility keep their mean and covariance.
    pub min_component_mass: f64,
    /// Relative ridge `ε·tr(Σ)/D` added to every covariance.
    pub cov_reg: f64,
    pub fixed_covariances: bool,
}

impl Default for GmmUpdate {
    fn default() -> Self {
        GmmUpdate {
            min_group_mass: 10.0,
            min_component_mass: 1.0,
            cov_reg: 1e-6,
            fixed_covariances: false,
        }
    }
}

/// Weighted mixture updates on the bias-corrected data. Returns the new
/// parameters and a warning for every frozen group.
pub fn m_step_gmm(
    data: &ModelData,
    est: &EStep,
    field: &BrightnessModel,
    old: &GmmParams,
    opts: &GmmUpdate,
) -> Result<(GmmParams, Vec<String>)> {
    let ns = est.n_slots;
    let ch = data.channels;
    if ns != old.n_slots() {
        return Err(Error::InvalidInput(
            "responsibilities do not match the mixtures".into(),
        ));
    }
    // first pass: mass and weighted sums
    let stride = 1 + ch;
    let first = chunked_sum(data.len(), ns * stride, |r, acc| {
        let mut e = [0.0; 8];
        for i in r {
            data.corrected(i, field, &mut e);
            let q = &est.resp[i * ns..(i + 1) * ns];
            for s in 0..ns {
                let a = &mut acc[s * stride..(s + 1) * stride];
                a[0] += q[s];
                for c in 0..ch {
                    a[1 + c] += q[s] * e[c];
                }
            }
        }
    });
    let mass: Vec<f64> = (0..ns).map(|s| first[s * stride]).collect();
    let means: Vec<Vec<f64>> = (0..ns)
        .map(|s| {
            (0..ch)
                .map(|c| first[s * stride + 1 + c] / mass[s].max(f64::MIN_POSITIVE))
                .collect()
        })
        .collect();
    // second pass: scatter about the new means
    let cc = ch * ch;
    let second = chunked_sum(data.len(), ns * cc, |r, acc| {
        let mut e = [0.0; 8];
        for i in r {
            data.corrected(i, field, &mut e);
            let q = &est.resp[i * ns..(i + 1) * ns];
            for s in 0..ns {
                let a = &mut acc[s * cc..(s + 1) * cc];
                for x in 0..ch {
                    let dx = e[x] - means[s][x];
                    for y in 0..ch {
                        a[x * ch + y] += q[s] * dx * (e[y] - means[s][y]);
                    }
                }
            }
        }
    });

    let mut warnings = Vec::new();
    let mut groups = Vec::with_capacity(old.groups.len());
    let mut s0 = 0;
    for (gi, m) in old.groups.iter().enumerate() {
        let r = s0..s0 + m.len();
        s0 += m.len();
        let total: f64 = mass[r.clone()].iter().sum();
        if total < opts.min_group_mass {
            warnings.push(format!(
                "mixture {gi} has responsibility {total:.3} < {}; parameters frozen",
                opts.min_group_mass
            ));
            groups.push(m.clone());
            continue;
        }
        let mut new = m.clone();
        for (j, s) in r.enumerate() {
            new.weights[j] = mass[s] / total;
            if mass[s] < opts.min_component_mass {
                continue;
            }
            new.means[j] = means[s].clone();
            if !opts.fixed_covariances {
                let mut cov: Vec<f64> = second[s * cc..(s + 1) * cc]
                    .iter()
                    .map(|v| v / mass[s])
                    .collect();
                for x in 0..ch {
                    for y in 0..x {
                        let avg = 0.5 * (cov[x * ch + y] + cov[y * ch + x]);
                        cov[x * ch + y] = avg;
                        cov[y * ch + x] = avg;
                    }
                }
                let tr: f64 = (0..ch).map(|x| cov[x * ch + x]).sum::<f64>() / ch as f64;
                let ridge = opts.cov_reg * tr.max(f64::MIN_POSITIVE);
                for x in 0..ch {
                    cov[x * ch + x] += ridge;
                }
                if crate::gauss::cholesky(&cov, ch).is_some() {
                    new.covs[j] = cov;
                } else {
                    warnings.push(format!(
                        "mixture {gi} component {j} covariance is singular; kept previous"
                    ));
                }
            }
        }
        // exact renormalisation so weights sum to one to rounding
        let ws: f64 = new.weights.iter().sum();
        new.weights.iter_mut().for_each(|w| *w /= ws);
        groups.push(new);
    }
    Ok((
        GmmParams {
            channels: ch,
            class_group: old.class_group.clone(),
            groups,
        },
        warnings,
    ))
}

/// Fewest voxels for which a slice's field is estimated.
pub const MIN_SLICE_VOXELS: usize = 20;

/// Exact maximisation of the bound in the field coefficients (one linear
/// system per slice), followed by the gauge fix that moves the mean field
/// into the Gaussian means. Returns the new field, the shifted mixtures and
/// warnings for slices that could not be estimated.
pub fn m_step_brightness(
    data: &ModelData,
    est: &EStep,
    gmm: &GmmParams,
) -> Result<(BrightnessModel, GmmParams, Vec<String>)> {
    let slots = Slots::new(gmm)?;
    let ns = slots.len();
    let ch = data.channels;
    let nb = 4 * ch;
    let precisions: Vec<Vec<f64>> = slots.gauss.iter().map(Gaussian::precision).collect();
    let ranges = data.slice_ranges();

    let solved: Vec<Option<Vec<f64>>> = ranges
        .par_iter()
        .map(|r| {
            if r.len() < MIN_SLICE_VOXELS {
                return None;
            }
            let mut a = vec![0.0; nb * nb];
            let mut rhs = vec![0.0; nb];
            let mut w = vec![0.0; ch * ch];
            let mut v = vec![0.0; ch];
            for i in r.clone() {
                w.fill(0.0);
                v.fill(0.0);
                let q = &est.resp[i * ns..(i + 1) * ns];
                let d = &data.d[i * ch..(i + 1) * ch];
                for s in 0..ns {
                    if q[s] == 0.0 {
                        continue;
                    }
                    let p = &precisions[s];
                    let mu = slots.gauss[s].mean();
                    for x in 0..ch {
                        for y in 0..ch {
                            let qp = q[s] * p[x * ch + y];
                            w[x * ch + y] += qp;
                            v[x] += qp * (d[y] - mu[y]);
                        }
                    }
                }
                let b = &data.basis[i];
                for x in 0..ch {
                    for j in 0..4 {
                        rhs[x * 4 + j] += v[x] * b[j];
                        for y in 0..ch {
                            let wxy = w[x * ch + y] * b[j];
                            for jj in 0..4 {
                                a[(x * 4 + j) * nb + y * 4 + jj] += wxy * b[jj];
                            }
                        }
                    }
                }
            }
            let m = DMatrix::from_row_slice(nb, nb, &a);
            let chol = m.cholesky()?;
            let sol = chol.solve(&DVector::from_column_slice(&rhs));
            sol.iter()
                .all(|x| x.is_finite())
                .then(|| sol.iter().copied().collect())
        })
        .collect();

    let mut warnings = Vec::new();
    let mut field = BrightnessModel::zeros(data.n_slices(), ch);
    for (n, s) in solved.iter().enumerate() {
        match s {
            Some(x) => {
                for c in 0..ch {
                    field.coeffs[n * ch + c].copy_from_slice(&x[c * 4..c * 4 + 4]);
                }
            }
            None if ranges[n].is_empty() => {}
            None => warnings.push(format!(
                "slice {n}: brightness field not estimable from {} voxels; set to zero",
                ranges[n].len()
            )),
        }
    }

    // gauge: zero mean field over the modelled voxels
    let mean_field = chunked_sum(data.len(), ch, |r, acc| {
        for i in r {
            for c in 0..ch {
                acc[c] += field.value(data.slice[i], c, &data.basis[i]);
            }
        }
    });
    let shift: Vec<f64> = mean_field.iter().map(|v| v / data.len() as f64).collect();
    let (field, gmm) = apply_gauge(&field, gmm, &shift);
    Ok((field, gmm, warnings))
}

/// Subtract `shift` from every slice's constant term and add it to every
/// Gaussian mean; the likelihood is unchanged.
pub fn apply_gauge(
    field: &BrightnessModel,
    gmm: &GmmParams,
    shift: &[f64],
) -> (BrightnessModel, GmmParams) {
    let mut f = field.clone();
    let ch = f.channels;
    for (i, c) in f.coeffs.iter_mut().enumerate() {
        c[0] -= shift[i % ch];
    }
    let mut g = gmm.clone();
    for m in &mut g.groups {
        for mu in &mut m.means {
            for (x, s) in mu.iter_mut().zip(shift) {
                *x += s;
            }
        }
    }
    (f, g)
}

/// Starting mixtures from prior-weighted statistics of the uncorrected
/// data. Components within a group are spread along the first channel.
pub fn initial_gmm(
    data: &ModelData,
    prior: &[f64],
    class_group: &[usize],
    components: &[usize],
) -> Result<GmmParams> {
    let k = class_group.len();
    let ng = components.len();
    let ch = data.channels;
    let gp = group_prior(prior, class_group, ng);
    let stride = 1 + ch + ch * ch;
    let acc = chunked_sum(data.len(), ng * stride, |r, acc| {
        for i in r {
            let d = &data.d[i * ch..(i + 1) * ch];
            for g in 0..ng {
                let w = gp[i * ng + g];
                let a = &mut acc[g * stride..(g + 1) * stride];
                a[0] += w;
                for x in 0..ch {
                    a[1 + x] += w * d[x];
                    for y in 0..ch {
                        a[1 + ch + x * ch + y] += w * d[x] * d[y];
                    }
                }
            }
        }
    });
    // pooled statistics stand in for groups the prior never reaches
    let pooled = chunked_sum(data.len(), 1 + ch + ch * ch, |r, a| {
        for i in r {
            let d = &data.d[i * ch..(i + 1) * ch];
            a[0] += 1.0;
            for x in 0..ch {
                a[1 + x] += d[x];
                for y in 0..ch {
                    a[1 + ch + x * ch + y] += d[x] * d[y];
                }
            }
        }
    });
    let moments = |a: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let m: Vec<f64> = (0..ch).map(|x| a[1 + x] / a[0]).collect();
        let mut cov: Vec<f64> = (0..ch * ch)
            .map(|xy| a[1 + ch + xy] / a[0] - m[xy / ch] * m[xy % ch])
            .collect();
        let tr = (0..ch).map(|x| cov[x * ch + x]).sum::<f64>() / ch as f64;
        for x in 0..ch {
            cov[x * ch + x] += 1e-3 * tr.max(1e-6) + 1e-8;
        }
        (m, cov)
    };
    let mut groups = Vec::with_capacity(ng);
    for g in 0..ng {
        let a = &acc[g * stride..(g + 1) * stride];
        let (mean, cov) = if a[0] >= 1.0 {
            moments(a)
        } else {
            moments(&pooled)
        };
        let nc = components[g].max(1);
        let sd0 = cov[0].sqrt();
        let mut m = Mixture {
            weights: vec![1.0 / nc as f64; nc],
            means: Vec::new(),
            covs: Vec::new(),
        };
        for c in 0..nc {
            let off = if nc == 1 {
                0.0
            } else {
                (c as f64 / (nc - 1) as f64 - 0.5) * sd0
            };
            let mut mu = mean.clone();
            mu[0] += off;
            m.means.push(mu);
            m.covs.push(cov.clone());
        }
        groups.push(m);
    }
    let out = GmmParams {
        channels: ch,
        class_group: class_group.to_vec(),
        groups,
    };
    debug_assert_eq!(out.class_group.len(), k);
    out.validate()?;
    Ok(out)
}
