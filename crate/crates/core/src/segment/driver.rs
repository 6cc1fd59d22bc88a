use serde::{Deserialize, Serialize};

use super::affine::{affine_atlas_init, AffineInitConfig};
use super::deform::{optimize_deformation, prior_for_data, DeformConfig, DeformationState};
use super::model::{
    e_step, initial_gmm, m_step_brightness, m_step_gmm, EStep, GmmUpdate, ModelData,
};
use super::{
    log_transform, AtlasPrior, BrightnessModel, GmmParams, SoftSegmentation,
    BACKGROUND_GROUP_PREFIX, LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::linalg::IDENTITY4;
use crate::scalar::Real;
use crate::volume::{check_same_grid3, Volume};

/// Largest tolerated drop of the objective between accepted updates.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub log_floor: f64,
    pub components: usize,
    /// Components for mixture groups named `background…`.
    pub background_components: usize,
    pub stiffness: f64,
    /// Overrides the atlas control spacing when set.
    pub control_spacing: Option<f64>,
    pub gem_max_iterations: usize,
    pub gem_tolerance: f64,
    pub outer_max_iterations: usize,
    pub outer_tolerance: f64,
    pub min_group_mass: f64,
    pub cov_reg: f64,
    pub fixed_covariances: bool,
    pub estimate_field: bool,
    /// Register the atlas to the mask first; otherwise the atlas is taken
    /// as already in volume millimetres.
    pub affine_init: bool,
    pub affine: AffineInitConfig,
    pub deform: DeformConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            log_floor: LOG_FLOOR,
            components: 1,
            background_components: 3,
            stiffness: 1.0,
            control_spacing: None,
            gem_max_iterations: 100,
            gem_tolerance: 1e-5,
            outer_max_iterations: 5,
            outer_tolerance: 1e-5,
            min_group_mass: 10.0,
            cov_reg: 1e-6,
            fixed_covariances: false,
            estimate_field: true,
            affine_init: true,
            affine: AffineInitConfig::default(),
            deform: DeformConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStep {
    Init,
    Gmm,
    Brightness,
    Deformation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub step: TraceStep,
    /// Log-likelihood bound minus the deformation penalty after the step.
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub segmentation: SoftSegmentation,
    pub gmm: GmmParams,
    pub field: BrightnessModel,
    pub deformation: DeformationState,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
    /// Voxels without probability mass in the final E step.
    pub zero_mass: usize,
}

impl SegmentResult {
    /// Objectives of accepted steps, in order.
    pub fn objective_trace(&self) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|t| t.accepted)
            .map(|t| t.objective)
            .collect()
    }
}

fn penalty_term(def: &DeformationState) -> f64 {
    if def.is_frozen() || def.stiffness == 0.0 {
        0.0
    } else {
        def.stiffness * def.penalty()
    }
}

struct State {
    prior: Vec<f64>,
    gmm: GmmParams,
    field: BrightnessModel,
    def: DeformationState,
    est: EStep,
    objective: f64,
}

/// Fit the model to the brain voxels of `volume` (intensities in `[0, 1]`)
/// and return the posterior of the final E step.
pub fn segment_volume<T: Real, M: Real>(
    volume: &Volume<T>,
    mask: &Volume<M>,
    atlas: &AtlasPrior,
    cfg: &SegmentConfig,
) -> Result<SegmentResult> {
    atlas.validate()?;
    check_same_grid3(volume.grid(), mask.grid(), "segmentation mask")?;
    if !(cfg.stiffness >= 0.0) {
        return Err(Error::InvalidInput("stiffness must be non-negative".into()));
    }
    if cfg.components == 0 || cfg.background_components == 0 {
        return Err(Error::InvalidInput(
            "mixtures need at least one component".into(),
        ));
    }
    let grid = *volume.grid();
    let k = atlas.n_classes();
    let log = log_transform(volume, cfg.log_floor)?;
    let data = ModelData::new(&log, mask)?;
    let (class_group, names) = atlas.groups();
    let comps: Vec<usize> = names
        .iter()
        .map(|n| {
            if n.starts_with(BACKGROUND_GROUP_PREFIX) {
                cfg.background_components
            } else {
                cfg.components
            }
        })
        .collect();
    let spacing = cfg.control_spacing.unwrap_or(atlas.control_spacing);
    let mut warnings = Vec::new();

    let affine = if cfg.affine_init && k > 1 {
        affine_atlas_init(atlas, mask, &cfg.affine)?
    } else {
        IDENTITY4
    };
    let def = DeformationState::new(affine, &grid, spacing, cfg.stiffness)?;
    let prior = prior_for_data(atlas, &def, &data)?;
    let gmm = initial_gmm(&data, &prior, &class_group, &comps)?;
    let field = BrightnessModel::zeros(data.n_slices(), data.channels);
    let est = e_step(&data, &prior, &gmm, &field)?;
    let objective = est.bound - penalty_term(&def);
    let mut s = State {
        prior,
        gmm,
        field,
        def,
        est,
        objective,
    };
    let mut trace = vec![TraceEntry {
        outer: 0,
        step: TraceStep::Init,
        objective,
        accepted: true,
    }];

    let gmm_opts = GmmUpdate {
        min_group_mass: cfg.min_group_mass,
        cov_reg: cfg.cov_reg,
        fixed_covariances: cfg.fixed_covariances,
        ..GmmUpdate::default()
    };
    let converged = |old: f64, new: f64, tol: f64| new - old <= tol * new.abs().max(1.0);

    // K = 1 has nothing to fit: every brain voxel is the single class
    let fit = k > 1;
    for outer in 0..if fit { cfg.outer_max_iterations } else { 0 } {
        let outer_start = s.objective;
        for _ in 0..cfg.gem_max_iterations {
            let start = s.objective;
            let (gmm, w) = m_step_gmm(&data, &s.est, &s.field, &s.gmm, &gmm_opts)?;
            warnings.extend(w);
            let est = e_step(&data, &s.prior, &gmm, &s.field)?;
            let obj = est.bound - penalty_term(&s.def);
            let ok = obj >= s.objective;
            trace.push(TraceEntry {
                outer,
                step: TraceStep::Gmm,
                objective: obj,
                accepted: ok,
            });
            if ok {
                (s.gmm, s.est, s.objective) = (gmm, est, obj);
            }
            if cfg.estimate_field {
                let (field, gmm, w) = m_step_brightness(&data, &s.est, &s.gmm)?;
                warnings.extend(w);
                let est = e_step(&data, &s.prior, &gmm, &field)?;
                let obj = est.bound - penalty_term(&s.def);
                let ok = obj >= s.objective;
                trace.push(TraceEntry {
                    outer,
                    step: TraceStep::Brightness,
                    objective: obj,
                    accepted: ok,
                });
                if ok {
                    (s.field, s.gmm, s.est, s.objective) = (field, gmm, est, obj);
                }
            }
            if converged(start, s.objective, cfg.gem_tolerance) {
                break;
            }
        }
        if !s.def.is_frozen() {
            let (def, rep) =
                optimize_deformation(&data, atlas, &s.def, &s.gmm, &s.field, &cfg.deform)?;
            let prior = prior_for_data(atlas, &def, &data)?;
            let est = e_step(&data, &prior, &s.gmm, &s.field)?;
            let obj = est.bound - penalty_term(&def);
            let ok = obj >= s.objective;
            log::debug!(
                "deformation: {:.6} -> {:.6} ({} iterations), objective {:.6}",
                rep.initial,
                rep.final_value,
                rep.iterations,
                obj
            );
            trace.push(TraceEntry {
                outer,
                step: TraceStep::Deformation,
                objective: obj,
                accepted: ok,
            });
            if ok {
                (s.def, s.prior, s.est, s.objective) = (def, prior, est, obj);
            }
        }
        log::info!(
            "segmentation outer iteration {outer}: objective {:.6}",
            s.objective
        );
        if converged(outer_start, s.objective, cfg.outer_tolerance) {
            break;
        }
    }

    let accepted: Vec<f64> = trace
        .iter()
        .filter(|t| t.accepted)
        .map(|t| t.objective)
        .collect();
    if let Some(w) = accepted.windows(2).find(|w| w[1] < w[0] - MONOTONE_SLACK) {
        return Err(Error::Numerical(format!(
            "objective decreased from {} to {}",
            w[0], w[1]
        )));
    }
    if s.est.zero_mass > 0 {
        warnings.push(format!(
            "{} voxels had no probability mass under the model",
            s.est.zero_mass
        ));
    }

    let post = s.est.class_posterior(&s.prior, &s.gmm);
    let mut full = vec![0.0; grid.len() * k];
    for row in full.chunks_mut(k) {
        row[0] = 1.0;
    }
    for (i, &v) in data.voxels.iter().enumerate() {
        full[v * k..(v + 1) * k].copy_from_slice(&post[i * k..(i + 1) * k]);
    }
    let segmentation = SoftSegmentation {
        posterior: Volume::new(grid, k, full)?,
        labels: atlas.labels.clone(),
    };
    Ok(SegmentResult {
        segmentation,
        gmm: s.gmm,
        field: s.field,
        deformation: s.def,
        trace,
        warnings,
        zero_mass: s.est.zero_mass,
    })
}
