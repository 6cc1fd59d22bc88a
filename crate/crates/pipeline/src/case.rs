//! Case directory layout, operator annotations and product provenance.
//!
//! ```text
//! <case>/
//!   photos/            raw photographs (PNG or JPEG)
//!   landmarks.json     { photo: { "points": [[x, y] ×3], "ruler": {...} } }
//!   seeds.json         { photo: [x, y] }   raw pixel coordinates
//!   order.json         [ photo, ... ]      anatomical order
//!   config.toml        optional overrides
//!   calibrated/ masks/ stack/ recon/ seg/ reports/   products
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use photovol::preprocess::LandmarkSet;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{self, PipelineError, Result};
use crate::imageio::is_photo;

pub const LANDMARKS: &str = "landmarks.json";
pub const SEEDS: &str = "seeds.json";
pub const ORDER: &str = "order.json";
pub const PROVENANCE: &str = "provenance.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Calibrate,
    Mask,
    Stack,
    Reconstruct,
    Segment,
    Evaluate,
}

impl StageName {
    pub fn dir(self) -> &'static str {
        match self {
            StageName::Calibrate => "calibrated",
            StageName::Mask => "masks",
            StageName::Stack => "stack",
            StageName::Reconstruct => "recon",
            StageName::Segment => "seg",
            StageName::Evaluate => "reports",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            StageName::Calibrate => "calibrate",
            StageName::Mask => "mask",
            StageName::Stack => "stack",
            StageName::Reconstruct => "reconstruct",
            StageName::Segment => "segment",
            StageName::Evaluate => "evaluate",
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(error::read(path)?)))
}

/// Inputs, configuration and outputs of one stage run. Paths inside the
/// case are stored relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: StageName,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub root: PathBuf,
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serialisable");
    s.push(b'\n');
    s
}

impl Case {
    pub fn open(root: &Path) -> Result<Case> {
        if !root.join("photos").is_dir() {
            return Err(PipelineError::missing(
                format!("{}/photos", root.display()),
                "a case directory needs a photos/ folder",
            ));
        }
        Ok(Case {
            root: root.to_path_buf(),
        })
    }

    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn stage_dir(&self, s: StageName) -> PathBuf {
        self.root.join(s.dir())
    }

    /// Photo file names, sorted.
    pub fn photos(&self) -> Result<Vec<String>> {
        let dir = self.path("photos");
        let rd = std::fs::read_dir(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let mut names: Vec<String> = rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_photo(p))
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn photo_path(&self, name: &str) -> Result<PathBuf> {
        let valid = !name.is_empty() && !name.contains(['/', '\\']) && name != "." && name != "..";
        let p = self.path("photos").join(name);
        if valid && p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::missing(
                format!("photo {name}"),
                format!("no such file in {}", self.path("photos").display()),
            ))
        }
    }

    fn read_json<T: DeserializeOwned + Default>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        if !p.exists() {
            return Ok(T::default());
        }
        serde_json::from_slice(&error::read(&p)?)
            .map_err(|e| PipelineError::format(&p, e.to_string()))
    }

    fn write_json<T: Serialize>(&self, rel: &str, v: &T) -> Result<()> {
        error::write(&self.path(rel), &to_json(v))
    }

    pub fn landmarks(&self) -> Result<BTreeMap<String, LandmarkSet>> {
        self.read_json(LANDMARKS)
    }

    pub fn seeds(&self) -> Result<BTreeMap<String, [f64; 2]>> {
        self.read_json(SEEDS)
    }

    /// `None` when no order has been recorded.
    pub fn order(&self) -> Result<Option<Vec<String>>> {
        if !self.path(ORDER).exists() {
            return Ok(None);
        }
        self.read_json(ORDER).map(Some)
    }

    pub fn set_landmarks(&self, photo: &str, lm: LandmarkSet) -> Result<()> {
        self.photo_path(photo)?;
        lm.validate()
            .map_err(|e| PipelineError::Annotation(e.to_string()))?;
        let mut all = self.landmarks()?;
        all.insert(photo.to_string(), lm);
        self.write_json(LANDMARKS, &all)
    }

    pub fn set_seed(&self, photo: &str, seed: [f64; 2]) -> Result<()> {
        self.photo_path(photo)?;
        if !seed.iter().all(|v| v.is_finite()) {
            return Err(PipelineError::Annotation(
                "seed coordinates must be finite".into(),
            ));
        }
        let mut all = self.seeds()?;
        all.insert(photo.to_string(), seed);
        self.write_json(SEEDS, &all)
    }

    /// Record the anatomical order; it must list every photo exactly once.
    pub fn set_order(&self, order: &[String]) -> Result<()> {
        self.check_order(order)?;
        self.write_json(ORDER, &order)
    }

    pub fn check_order(&self, order: &[String]) -> Result<()> {
        let mut want = self.photos()?;
        let mut got = order.to_vec();
        want.sort();
        got.sort();
        if want != got {
            return Err(PipelineError::Annotation(format!(
                "order must list each of the {} photos exactly once",
                want.len()
            )));
        }
        if order.len() < 2 {
            return Err(PipelineError::Annotation(
                "a stack needs at least two photos".into(),
            ));
        }
        Ok(())
    }

    /// Key for `path` in a provenance record.
    pub fn rel(&self, path: &Path) -> String {
        match path.strip_prefix(&self.root) {
            Ok(r) => r.to_string_lossy().replace('\\', "/"),
            Err(_) => path.to_string_lossy().into_owned(),
        }
    }

    fn resolve(&self, key: &str) -> PathBuf {
        let p = Path::new(key);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn write_provenance(
        &self,
        stage: StageName,
        config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let hash_all = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            ps.iter()
                .map(|p| Ok((self.rel(p), sha256_file(p)?)))
                .collect()
        };
        let rec = Provenance {
            stage,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        error::write(&self.stage_dir(stage).join(PROVENANCE), &to_json(&rec))
    }

    pub fn provenance(&self, stage: StageName) -> Result<Option<Provenance>> {
        let p = self.stage_dir(stage).join(PROVENANCE);
        if !p.exists() {
            return Ok(None);
        }
        serde_json::from_slice(&error::read(&p)?)
            .map(Some)
            .map_err(|e| PipelineError::format(&p, e.to_string()))
    }

    /// Fail unless `stage` has run and neither its inputs nor its outputs
    /// have changed since.
    pub fn require(&self, stage: StageName) -> Result<Provenance> {
        let rec = self.provenance(stage)?.ok_or_else(|| {
            PipelineError::missing(
                format!("{}/ ({} products)", stage.dir(), stage.command()),
                format!("run `photovol {}` first", stage.command()),
            )
        })?;
        for (key, hash) in &rec.outputs {
            let p = self.resolve(key);
            if !p.exists() {
                return Err(PipelineError::missing(
                    key.clone(),
                    format!("rerun `photovol {}`", stage.command()),
                ));
            }
            if &sha256_file(&p)? != hash {
                return Err(PipelineError::Stale {
                    product: key.clone(),
                    reason: format!("modified after `{}` wrote it", stage.command()),
                });
            }
        }
        for (key, hash) in &rec.inputs {
            let p = self.resolve(key);
            let now = if p.exists() {
                Some(sha256_file(&p)?)
            } else {
                None
            };
            if now.as_deref() != Some(hash.as_str()) {
                return Err(PipelineError::Stale {
                    product: stage.dir().to_string(),
                    reason: format!(
                        "input {key} changed since `{}` ran; rerun it",
                        stage.command()
                    ),
                });
            }
        }
        Ok(rec)
    }

    /// True when `stage` products exist and are current.
    pub fn is_current(&self, stage: StageName) -> bool {
        self.require(stage).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use photovol::preprocess::RulerSpec;

    fn case_with(photos: &[&str]) -> (tempfile::TempDir, Case) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("photos")).unwrap();
        for p in photos {
            std::fs::write(dir.path().join("photos").join(p), b"x").unwrap();
        }
        let c = Case::open(dir.path()).unwrap();
        (dir, c)
    }

    #[test]
    fn annotations_round_trip() {
        let (_d, c) = case_with(&["b.png", "a.png", "notes.txt"]);
        assert_eq!(c.photos().unwrap(), vec!["a.png", "b.png"]);
        let lm = LandmarkSet {
            points: [[1.0, 2.0], [51.0, 2.0], [1.0, 52.5]],
            ruler: RulerSpec::default(),
        };
        c.set_landmarks("a.png", lm).unwrap();
        assert_eq!(c.landmarks().unwrap()["a.png"], lm);
        c.set_seed("b.png", [3.5, 4.0]).unwrap();
        assert_eq!(c.seeds().unwrap()["b.png"], [3.5, 4.0]);
        let order = vec!["b.png".to_string(), "a.png".to_string()];
        c.set_order(&order).unwrap();
        assert_eq!(c.order().unwrap().unwrap(), order);
    }

    #[test]
    fn invalid_annotations_are_rejected() {
        let (_d, c) = case_with(&["a.png", "b.png"]);
        let flat = LandmarkSet {
            points: [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]],
            ruler: RulerSpec::default(),
        };
        assert!(matches!(
            c.set_landmarks("a.png", flat),
            Err(PipelineError::Annotation(_))
        ));
        assert!(matches!(
            c.set_order(&["a.png".into()]),
            Err(PipelineError::Annotation(_))
        ));
        assert!(matches!(
            c.set_order(&["a.png".into(), "a.png".into()]),
            Err(PipelineError::Annotation(_))
        ));
        assert!(matches!(
            c.set_seed("../x", [1.0, 1.0]),
            Err(PipelineError::Missing { .. })
        ));
    }

    #[test]
    fn provenance_detects_missing_and_stale_products() {
        let (_d, c) = case_with(&["a.png", "b.png"]);
        assert!(matches!(
            c.require(StageName::Stack),
            Err(PipelineError::Missing { .. })
        ));
        let input = c.path("order.json");
        std::fs::write(&input, b"[]").unwrap();
        let out = c.stage_dir(StageName::Stack).join("x.nii");
        error::write(&out, b"data").unwrap();
        c.write_provenance(
            StageName::Stack,
            serde_json::json!({}),
            std::slice::from_ref(&input),
            std::slice::from_ref(&out),
        )
        .unwrap();
        assert!(c.require(StageName::Stack).is_ok());
        std::fs::write(&out, b"other").unwrap();
        assert!(matches!(
            c.require(StageName::Stack),
            Err(PipelineError::Stale { .. })
        ));
        std::fs::write(&out, b"data").unwrap();
        std::fs::write(&input, b"[1]").unwrap();
        assert!(matches!(
            c.require(StageName::Stack),
            Err(PipelineError::Stale { .. })
        ));
    }
}
