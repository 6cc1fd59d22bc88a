use serde::{Deserialize, Serialize};

use super::{Level, ReconProblem, ReconWeights, ReferenceMode, ReferenceVolume, TransformSet};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::linalg::{mat3_transpose, mat3_vec, mat4_mul, Mat4};
use crate::metrics::{center_of_gravity_2d, center_of_gravity_3d};
use crate::optim::{maximize, LbfgsConfig, Termination};
use crate::preprocess::SliceStack;
use crate::resample::{resample_mask, resample_slice};
use crate::scalar::Real;
use crate::transform::{Affine2D, Rigid3DScale};
use crate::volume::{Grid3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub level: Level,
    /// Downsampling factor (4 means quarter resolution).
    pub factor: usize,
}

pub const DEFAULT_SCHEDULE: [Stage; 6] = [
    Stage {
        level: Level::Rigid,
        factor: 4,
    },
    Stage {
        level: Level::Rigid,
        factor: 2,
    },
    Stage {
        level: Level::Rigid,
        factor: 1,
    },
    Stage {
        level: Level::Affine,
        factor: 4,
    },
    Stage {
        level: Level::Affine,
        factor: 2,
    },
    Stage {
        level: Level::Affine,
        factor: 1,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub weights: ReconWeights,
    pub schedule: Vec<Stage>,
    pub lbfgs: LbfgsConfig,
}

impl ReconConfig {
    pub fn for_mode(mode: ReferenceMode) -> Self {
        ReconConfig {
            weights: ReconWeights::for_mode(mode),
            schedule: DEFAULT_SCHEDULE.to_vec(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub level: Level,
    pub factor: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconResult {
    pub transforms: TransformSet,
    pub stages: Vec<StageReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Rendered<T> {
    pub image: Volume<T>,
    pub mask: Volume<T>,
}

fn place_masks<T: Real>(stack: &SliceStack<T>, phis: &[Affine2D]) -> Result<Volume<f64>> {
    let g = stack.grid();
    let masks: Vec<Image<f64>> = stack
        .masks
        .iter()
        .zip(phis)
        .map(|(m, phi)| resample_mask(&m.convert::<f64>(), phi, g).map(Mask::into_image))
        .collect::<Result<_>>()?;
    Volume::from_slices(stack.grid3()?, &masks)
}

/// Centre every slice mask on the grid and move the reference centre of
/// gravity onto that of the centred stack.
pub fn init_transforms<T: Real>(
    stack: &SliceStack<T>,
    reference: &ReferenceVolume,
) -> Result<TransformSet> {
    stack.validate()?;
    let phis: Vec<Affine2D> = stack
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let c = center_of_gravity_2d(m)
                .map_err(|_| Error::EmptyMask(format!("mask of slice {i} is empty")))?;
            Ok(Affine2D::translation(c[0], c[1]))
        })
        .collect::<Result<_>>()?;
    let placed = place_masks(stack, &phis)?;
    let cs = center_of_gravity_3d(&placed)
        .map_err(|_| Error::EmptyMask("centred stack has no mask mass".into()))?;
    let cr = center_of_gravity_3d(&reference.volume)
        .map_err(|_| Error::EmptyMask("reference volume is empty".into()))?;
    let psi = Rigid3DScale {
        angles: [0.0; 3],
        translation: [cs[0] - cr[0], cs[1] - cr[1], cs[2] - cr[2]],
        z_scale: 1.0,
    };
    Ok(TransformSet {
        phis,
        psi,
        level: Level::Rigid,
    })
}

/// Remove the global in-plane translation left free by the objective:
/// shift every slice (and the reference with it) by a whole number of
/// pixels so the reconstructed mask is centred on the grid.
pub fn recenter_gauge<T: Real>(stack: &SliceStack<T>, ts: &TransformSet) -> Result<TransformSet> {
    let placed = place_masks(stack, &ts.phis)?;
    let c = match center_of_gravity_3d(&placed) {
        Ok(c) => c,
        Err(_) => return Ok(ts.clone()),
    };
    let ps = stack.pixel_size();
    let d = [-(c[0] / ps).round() * ps, -(c[1] / ps).round() * ps];
    if d == [0.0, 0.0] {
        return Ok(ts.clone());
    }
    let phis = ts
        .phis
        .iter()
        .map(|phi| {
            let ad = phi.apply_linear(d);
            let p = phi.params;
            Affine2D {
                params: [p[0], p[1], p[2], p[3], p[4] - ad[0], p[5] - ad[1]],
            }
        })
        .collect();
    let mut psi = ts.psi;
    psi.translation[0] += d[0];
    psi.translation[1] += d[1];
    Ok(TransformSet {
        phis,
        psi,
        level: ts.level,
    })
}

/// Run the coarse-to-fine schedule from the centre-of-gravity
/// initialisation. `progress` is called after every stage.
pub fn optimize_reconstruction<T: Real>(
    stack: &SliceStack<T>,
    reference: &ReferenceVolume,
    cfg: &ReconConfig,
    mut progress: impl FnMut(&StageReport),
) -> Result<ReconResult> {
    cfg.weights.validate()?;
    if cfg.schedule.is_empty() {
        return Err(Error::InvalidInput("empty optimisation schedule".into()));
    }
    let mut ts = init_transforms(stack, reference)?;
    let mut stages = Vec::with_capacity(cfg.schedule.len());
    let mut warnings = Vec::new();
    for (i, st) in cfg.schedule.iter().enumerate() {
        ts.level = st.level;
        let problem = ReconProblem::new(stack, reference, cfg.weights, st.level, st.factor)?
            .with_z_scale(ts.psi.z_scale)?;
        let x0 = problem.to_scaled(&problem.pack(&ts));
        let res = maximize(|x, g| problem.value_grad_scaled(x, g), &x0, &cfg.lbfgs);
        if !res.f.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became non-finite in stage {i}"
            )));
        }
        ts = problem.unpack(&problem.from_scaled(&res.x));
        if res.termination == Termination::LineSearchFailed {
            let msg = format!(
                "stage {i} ({:?}, 1/{}) stopped on a failed line search after {} iterations",
                st.level, st.factor, res.iterations
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let report = StageReport {
            stage: i,
            level: st.level,
            factor: st.factor,
            initial: res.trace[0],
            final_value: res.f,
            iterations: res.iterations,
            evaluations: res.evaluations,
            termination: res.termination,
            trace: res.trace,
        };
        log::info!(
            "stage {i}: {:?} 1/{} objective {:.6} -> {:.6}",
            st.level,
            st.factor,
            report.initial,
            report.final_value
        );
        progress(&report);
        stages.push(report);
    }
    let transforms = recenter_gauge(stack, &ts)?;
    Ok(ReconResult {
        transforms,
        stages,
        warnings,
    })
}

/// Stack → reference-frame affine of the rendered volume grid.
fn reference_frame(stack_grid: &Grid3, psi: &Rigid3DScale) -> Result<Grid3> {
    let rt = mat3_transpose(&psi.rotation());
    let mut m: Mat4 = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = rt[i][j] * if j == 2 { psi.z_scale } else { 1.0 };
        }
    }
    let t = mat3_vec(&rt, psi.translation);
    for i in 0..3 {
        m[i][3] = -t[i];
    }
    m[3][3] = 1.0;
    Grid3::new(stack_grid.dims, mat4_mul(&m, &stack_grid.grid_to_world))
}

/// Apply every `Φ_n` and stack the slices; the volume header places the
/// result in the reference frame, so the z voxel size is the nominal
/// thickness times the z scale.
pub fn render_reconstruction<T: Real>(
    stack: &SliceStack<T>,
    ts: &TransformSet,
) -> Result<Rendered<T>> {
    stack.validate()?;
    if ts.phis.len() != stack.len() {
        return Err(Error::InvalidInput(format!(
            "{} slice transforms for {} slices",
            ts.phis.len(),
            stack.len()
        )));
    }
    let g = stack.grid();
    let images: Vec<Image<T>> = stack
        .slices
        .iter()
        .zip(&ts.phis)
        .map(|(s, phi)| resample_slice(s, phi, g))
        .collect::<Result<_>>()?;
    let masks: Vec<Image<T>> = stack
        .masks
        .iter()
        .zip(&ts.phis)
        .map(|(m, phi)| resample_mask(m, phi, g).map(Mask::into_image))
        .collect::<Result<_>>()?;
    let grid = reference_frame(&stack.grid3()?, &ts.psi)?;
    Ok(Rendered {
        image: Volume::from_slices(grid, &images)?,
        mask: Volume::from_slices(grid, &masks)?,
    })
}
