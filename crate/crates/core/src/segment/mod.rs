//! Atlas-based Bayesian segmentation of a reconstructed RGB volume.
//!
//! The generative model: every brain voxel draws a class from a deformable
//! probabilistic atlas, then a log-intensity from that class's Gaussian
//! mixture, offset by a smooth per-slice brightness field. Parameters are
//! fitted by coordinate ascent: generalised EM for the mixtures and the
//! field, L-BFGS for the atlas deformation.

mod affine;
mod deform;
mod driver;
mod model;

pub use affine::{affine_atlas_init, AffineInitConfig};
pub use deform::{
    optimize_deformation, prior_at_voxels, prior_for_data, DeformConfig, DeformProblem,
    DeformReport, DeformationState,
};
pub use driver::{
    segment_volume, SegmentConfig, SegmentResult, TraceEntry, TraceStep, MONOTONE_SLACK,
};
pub use model::{
    apply_gauge, e_step, initial_gmm, m_step_brightness, m_step_gmm, EStep, GmmUpdate, ModelData,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume;

/// Smallest intensity used before taking logs: one 8-bit step.
pub const LOG_FLOOR: f64 = 1.0 / 255.0;

/// `ln(max(v, floor))` channel by channel.
pub fn log_transform<T: Real>(volume: &Volume<T>, floor: f64) -> Result<Volume<f64>> {
    if !(floor > 0.0) {
        return Err(Error::InvalidInput(format!(
            "log floor must be positive, got {floor}"
        )));
    }
    if let Some(v) = volume.data().iter().find(|v| !(v.as_f64() >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "intensities must be non-negative, found {}",
            v.as_f64()
        )));
    }
    Ok(volume.convert::<f64>().map(|v| v.max(floor).ln()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub id: u16,
    pub name: String,
    /// Classes with the same group share one Gaussian mixture.
    pub gmm_group: String,
}

/// A probabilistic atlas: one probability channel per class. Class 0 is
/// background and is what voxels outside the atlas field receive.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasPrior {
    pub prob: Volume<f32>,
    pub labels: Vec<LabelInfo>,
    /// Distance between deformation control points in millimetres.
    pub control_spacing: f64,
}

pub const DEFAULT_CONTROL_SPACING: f64 = 10.0;

impl AtlasPrior {
    pub fn new(prob: Volume<f32>, labels: Vec<LabelInfo>, control_spacing: f64) -> Result<Self> {
        let a = AtlasPrior {
            prob,
            labels,
            control_spacing,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.prob.channels();
        if self.labels.len() != k {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} atlas channels",
                self.labels.len(),
                k
            )));
        }
        if !(self.control_spacing > 0.0) {
            return Err(Error::InvalidInput(
                "control spacing must be positive".into(),
            ));
        }
        let mut ids: Vec<u16> = self.labels.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != k {
            return Err(Error::InvalidInput("atlas label ids must be unique".into()));
        }
        for (v, p) in self.prob.data().chunks(k).enumerate() {
            let s: f64 = p.iter().map(|x| *x as f64).sum();
            if p.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!(
                    "atlas probabilities at voxel {v} sum to {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// Mixture group of each class and the group names in first-seen order.
    pub fn groups(&self) -> (Vec<usize>, Vec<String>) {
        let mut names: Vec<String> = Vec::new();
        let idx = self
            .labels
            .iter()
            .map(|l| match names.iter().position(|n| *n == l.gmm_group) {
                Some(i) => i,
                None => {
                    names.push(l.gmm_group.clone());
                    names.len() - 1
                }
            })
            .collect();
        (idx, names)
    }

    /// Tissue probability `1 - p(background)` as a single-channel volume.
    pub fn tissue(&self) -> Volume<f64> {
        let k = self.n_classes();
        let g = *self.prob.grid();
        let data = self
            .prob
            .data()
            .chunks(k)
            .map(|p| 1.0 - p[0] as f64)
            .collect();
        Volume::new(g, 1, data).expect("one value per voxel")
    }
}

/// Groups whose name starts with this prefix get more mixture components.
pub const BACKGROUND_GROUP_PREFIX: &str = "background";

/// One Gaussian mixture over log intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `D × D` covariances.
    pub covs: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub channels: usize,
    /// Mixture group of each class.
    pub class_group: Vec<usize>,
    pub groups: Vec<Mixture>,
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.channels;
        for (gi, m) in self.groups.iter().enumerate() {
            if m.is_empty() || m.means.len() != m.len() || m.covs.len() != m.len() {
                return Err(Error::InvalidInput(format!("mixture {gi} is malformed")));
            }
            let ws: f64 = m.weights.iter().sum();
            if (ws - 1.0).abs() > 1e-10 || m.weights.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "mixture {gi} weights sum to {ws}"
                )));
            }
            for (mu, cov) in m.means.iter().zip(&m.covs) {
                if mu.len() != d
                    || cov.len() != d * d
                    || mu.iter().chain(cov).any(|v| !v.is_finite())
                {
                    return Err(Error::InvalidInput(format!(
                        "mixture {gi} has a bad component"
                    )));
                }
                crate::gauss::cholesky(cov, d).ok_or_else(|| {
                    Error::Numerical(format!("mixture {gi} covariance is not SPD"))
                })?;
            }
        }
        if let Some(g) = self.class_group.iter().find(|g| **g >= self.groups.len()) {
            return Err(Error::InvalidInput(format!(
                "class mapped to missing mixture {g}"
            )));
        }
        Ok(())
    }

    /// Total number of (group, component) slots.
    pub fn n_slots(&self) -> usize {
        self.groups.iter().map(Mixture::len).sum()
    }
}

/// Per-slice bilinear log-brightness field. Slice `n`, channel `c` has
/// coefficients for the basis `(1, u, v, uv)` where `u, v ∈ [-1, 1]` span
/// the slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrightnessModel {
    pub n_slices: usize,
    pub channels: usize,
    /// Indexed `[slice * channels + channel]`.
    pub coeffs: Vec<[f64; 4]>,
}

impl BrightnessModel {
    pub fn zeros(n_slices: usize, channels: usize) -> Self {
        BrightnessModel {
            n_slices,
            channels,
            coeffs: vec![[0.0; 4]; n_slices * channels],
        }
    }

    #[inline]
    pub fn coeff(&self, slice: usize, channel: usize) -> &[f64; 4] {
        &self.coeffs[slice * self.channels + channel]
    }

    #[inline]
    pub fn value(&self, slice: usize, channel: usize, basis: &[f64; 4]) -> f64 {
        let c = self.coeff(slice, channel);
        c[0] * basis[0] + c[1] * basis[1] + c[2] * basis[2] + c[3] * basis[3]
    }

    /// Field of a `nx × ny × nz` grid as a `channels`-channel volume.
    pub fn render(&self, grid: crate::volume::Grid3) -> Result<Volume<f64>> {
        if grid.dims[2] != self.n_slices {
            return Err(Error::GridMismatch(format!(
                "{} field slices for {} grid slices",
                self.n_slices, grid.dims[2]
            )));
        }
        let [nx, ny, _] = grid.dims;
        Ok(Volume::from_fn(grid, self.channels, |[i, j, k], c| {
            self.value(k, c, &basis(i, j, nx, ny))
        }))
    }

    /// Divide the multiplicative field out of `volume`.
    pub fn correct<T: Real>(&self, volume: &Volume<T>) -> Result<Volume<f64>> {
        if volume.channels() != self.channels {
            return Err(Error::GridMismatch(format!(
                "{} field channels for {} volume channels",
                self.channels,
                volume.channels()
            )));
        }
        let field = self.render(*volume.grid())?;
        let data = volume
            .data()
            .iter()
            .zip(field.data())
            .map(|(v, f)| v.as_f64() * (-f).exp())
            .collect();
        Volume::new(*volume.grid(), self.channels, data)
    }
}

/// `(1, u, v, uv)` at voxel `(i, j)` of an `nx × ny` slice.
#[inline]
pub fn basis(i: usize, j: usize, nx: usize, ny: usize) -> [f64; 4] {
    let (u, v) = crate::eval::phantom::unit_coords(i, j, nx, ny);
    [1.0, u, v, u * v]
}

/// Posterior class probabilities per voxel and the derived hard labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation {
    /// `K`-channel posterior; voxels outside the brain are background.
    pub posterior: Volume<f64>,
    pub labels: Vec<LabelInfo>,
}

impl SoftSegmentation {
    /// Argmax class index per voxel; ties go to the lowest index.
    pub fn hard_classes(&self) -> Vec<usize> {
        let k = self.posterior.channels();
        self.posterior
            .data()
            .chunks(k)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Hard labels as atlas label ids.
    pub fn hard_labels(&self) -> crate::eval::LabelVolume {
        let ids = self
            .hard_classes()
            .into_iter()
            .map(|c| self.labels[c].id)
            .collect();
        crate::eval::LabelVolume::new(*self.posterior.grid(), ids).expect("one label per voxel")
    }
}
