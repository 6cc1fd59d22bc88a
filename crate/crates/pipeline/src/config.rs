//! Layered TOML configuration: built-in defaults, then `config.toml` in the
//! case directory, then a file passed on the command line. Later layers
//! override individual keys; tables merge recursively.

use std::path::Path;

use photovol::eval::PhantomSpec;
use photovol::optim::LbfgsConfig;
use photovol::preprocess::{MaskConfig, StackDirection};
use photovol::reconstruct::{ReconConfig, ReconWeights, ReferenceMode, Stage, DEFAULT_SCHEDULE};
use photovol::segment::SegmentConfig;
use serde::{Deserialize, Serialize};

use crate::error::{self, PipelineError, Result};

pub const CASE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    /// Pixel size of the calibrated archive images.
    pub archive_pixel_mm: f64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            archive_pixel_mm: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackSection {
    pub thickness_mm: f64,
    pub recon_resolution_mm: f64,
    pub direction: StackDirection,
}

impl Default for StackSection {
    fn default() -> Self {
        StackSection {
            thickness_mm: 4.0,
            recon_resolution_mm: 0.5,
            direction: StackDirection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    pub reference: ReferenceMode,
    /// Reference volume, relative to the case directory.
    pub reference_volume: String,
    /// Replaces the per-mode defaults when given.
    pub weights: Option<ReconWeights>,
    pub schedule: Vec<Stage>,
    pub lbfgs: LbfgsConfig,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        ReconstructSection {
            reference: ReferenceMode::Hard,
            reference_volume: "reference.nii".into(),
            weights: None,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl ReconstructSection {
    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            weights: self
                .weights
                .unwrap_or_else(|| ReconWeights::for_mode(self.reference)),
            schedule: self.schedule.clone(),
            lbfgs: self.lbfgs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSection {
    /// Atlas probabilities (4D NIfTI); `labels.tsv` sits next to it.
    pub atlas: Option<String>,
    pub write_posterior: bool,
    #[serde(flatten)]
    pub model: SegmentConfig,
}

impl Default for SegmentSection {
    fn default() -> Self {
        SegmentSection {
            atlas: None,
            write_posterior: true,
            model: SegmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Reference label map, relative to the case directory.
    pub truth: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub calibrate: CalibrateSection,
    pub mask: MaskConfig,
    pub stack: StackSection,
    pub reconstruct: ReconstructSection,
    pub segment: SegmentSection,
    pub evaluate: EvaluateSection,
    pub phantom: PhantomSpec,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| PipelineError::Config(format!("{origin}: {e}")))
}

impl Config {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Apply TOML layers in order on top of the defaults.
    pub fn layered(layers: &[(String, String)]) -> Result<Config> {
        let mut table = parse_table(&Config::default().to_toml(), "defaults")?;
        for (origin, text) in layers {
            merge(&mut table, parse_table(text, origin)?);
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the case file if present, then `extra`.
    pub fn load(case_dir: Option<&Path>, extra: Option<&Path>) -> Result<Config> {
        let mut layers = Vec::new();
        if let Some(dir) = case_dir {
            let p = dir.join(CASE_CONFIG);
            if p.is_file() {
                layers.push((p.display().to_string(), read_text(&p)?));
            }
        }
        if let Some(p) = extra {
            layers.push((p.display().to_string(), read_text(p)?));
        }
        Config::layered(&layers)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PipelineError::Config(format!(
                    "{what} must be positive, got {v}"
                )))
            }
        };
        pos(
            self.calibrate.archive_pixel_mm,
            "calibrate.archive_pixel_mm",
        )?;
        pos(self.stack.thickness_mm, "stack.thickness_mm")?;
        pos(self.stack.recon_resolution_mm, "stack.recon_resolution_mm")?;
        self.reconstruct.recon_config().weights.validate()?;
        if self.reconstruct.schedule.is_empty() {
            return Err(PipelineError::Config(
                "reconstruct.schedule is empty".into(),
            ));
        }
        Ok(())
    }
}

fn read_text(p: &Path) -> Result<String> {
    String::from_utf8(error::read(p)?).map_err(|_| PipelineError::format(p, "not UTF-8"))
}
