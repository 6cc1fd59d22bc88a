//! Joint registration of a slice stack against a 3D reference mask.
//!
//! Each slice `n` has an in-plane transform `Φ_n` ([`Affine2D`], pulling
//! stack-grid millimetres back into the slice), and the reference has one
//! [`Rigid3DScale`] `Ψ`. The objective rewards overlap of the stacked masks
//! with the resampled reference, photometric and shape consistency of
//! neighbouring slices, and (at the affine level) penalises area change.

mod objective;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transform::{Affine2D, Rigid3DScale};
use crate::volume::Volume;

pub use objective::{ObjectiveTerms, ReconProblem};
pub use optimize::{
    init_transforms, optimize_reconstruction, recenter_gauge, render_reconstruction, ReconConfig,
    ReconResult, Rendered, Stage, StageReport, DEFAULT_SCHEDULE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Binary mask measured from the specimen itself.
    Hard,
    /// Probabilistic whole-brain tissue map.
    Soft,
}

#[derive(Debug, Clone)]
pub struct ReferenceVolume {
    pub mode: ReferenceMode,
    pub volume: Volume<f64>,
}

impl ReferenceVolume {
    pub fn new<T: Real>(mode: ReferenceMode, volume: &Volume<T>) -> Result<Self> {
        if volume.channels() != 1 {
            return Err(Error::InvalidInput(
                "reference must have a single channel".into(),
            ));
        }
        let volume: Volume<f64> = volume.convert();
        for &v in volume.data() {
            let ok = match mode {
                ReferenceMode::Hard => v == 0.0 || v == 1.0,
                ReferenceMode::Soft => (0.0..=1.0).contains(&v),
            };
            if !ok {
                let want = if mode == ReferenceMode::Hard {
                    "{0, 1}"
                } else {
                    "[0, 1]"
                };
                return Err(Error::InvalidInput(format!(
                    "reference value {v} outside {want}"
                )));
            }
        }
        Ok(ReferenceVolume { mode, volume })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nu: f64,
}

impl ReconWeights {
    pub const SOFT: ReconWeights = ReconWeights {
        alpha: 10.0,
        beta: 1.0,
        gamma: 2.0,
        nu: 0.1,
    };
    pub const HARD: ReconWeights = ReconWeights {
        alpha: 50.0,
        beta: 1.0,
        gamma: 2.0,
        nu: 0.05,
    };

    pub fn for_mode(mode: ReferenceMode) -> Self {
        match mode {
            ReferenceMode::Soft => Self::SOFT,
            ReferenceMode::Hard => Self::HARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.nu];
        if !all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(Error::InvalidInput(
                "one of alpha, beta, gamma must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Rigid,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    pub phis: Vec<Affine2D>,
    pub psi: Rigid3DScale,
    pub level: Level,
}

impl TransformSet {
    pub fn identity(n: usize) -> Self {
        TransformSet {
            phis: vec![Affine2D::identity(); n],
            psi: Rigid3DScale::identity(),
            level: Level::Rigid,
        }
    }

    pub fn validate(&self, mode: ReferenceMode) -> Result<()> {
        for (i, p) in self.phis.iter().enumerate() {
            if !p.params.iter().all(|v| v.is_finite()) || p.det() == 0.0 {
                return Err(Error::NonInvertible);
            }
            if self.level == Level::Rigid && (p.orthonormality_error() > 1e-8 || p.det() < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "slice {i} transform is not a rotation at the rigid level"
                )));
            }
        }
        if mode == ReferenceMode::Soft && self.psi.z_scale != 1.0 {
            return Err(Error::InvalidInput(
                "z scale must stay 1 with a soft reference".into(),
            ));
        }
        Rigid3DScale::new(self.psi.angles, self.psi.translation, self.psi.z_scale).map(|_| ())
    }
}
