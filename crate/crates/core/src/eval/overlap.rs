use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{check_same_grid3, Grid3, Volume};

/// Integer labels on a volume grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid3,
    pub labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(grid: Grid3, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        Ok(LabelVolume { grid, labels })
    }

    /// Labels of axial slice `k` as a plain vector in row-major order.
    pub fn slice(&self, k: usize) -> Vec<u16> {
        let n = self.grid.dims[0] * self.grid.dims[1];
        self.labels[k * n..(k + 1) * n].to_vec()
    }

    pub fn to_volume<T: Real>(&self) -> Volume<T> {
        Volume::from_fn(self.grid, 1, |[i, j, k], _| {
            self.labels[self.grid.index(i, j, k)] as f64
        })
    }

    pub fn voxel_volume(&self) -> f64 {
        let v = self.grid.linear();
        crate::linalg::mat3_det(&v).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub label: u16,
    /// `None` when the structure is absent from both inputs.
    pub dice: Option<f64>,
    pub pred_voxels: usize,
    pub truth_voxels: usize,
}

/// Hard Dice `2|A∩B| / (|A|+|B|)` per requested label over two label
/// rasters of equal length.
pub fn dice_per_structure(pred: &[u16], truth: &[u16], structures: &[u16]) -> Result<Vec<DiceRow>> {
    if pred.len() != truth.len() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(structures
        .iter()
        .map(|&s| {
            let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
            for (&p, &t) in pred.iter().zip(truth) {
                let (ip, it) = (p == s, t == s);
                a += ip as usize;
                b += it as usize;
                both += (ip && it) as usize;
            }
            let dice = (a + b > 0).then(|| 2.0 * both as f64 / (a + b) as f64);
            DiceRow {
                label: s,
                dice,
                pred_voxels: a,
                truth_voxels: b,
            }
        })
        .collect())
}

pub fn dice_label_volumes(
    pred: &LabelVolume,
    truth: &LabelVolume,
    structures: &[u16],
) -> Result<Vec<DiceRow>> {
    check_same_grid3(&pred.grid, &truth.grid, "dice")?;
    dice_per_structure(&pred.labels, &truth.labels, structures)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub label: u16,
    pub soft_mm3: f64,
    pub hard_mm3: f64,
}

/// Structure volumes in mm³ from hard labels and from a posterior volume
/// whose channel `k` holds label `ids[k]`.
pub fn structure_volumes<T: Real>(
    posterior: &Volume<T>,
    hard: &LabelVolume,
    ids: &[u16],
) -> Result<Vec<VolumeRow>> {
    check_same_grid3(posterior.grid(), &hard.grid, "structure volumes")?;
    let k = posterior.channels();
    if ids.len() != k {
        return Err(Error::InvalidInput(format!(
            "{} label ids for {k} posterior channels",
            ids.len()
        )));
    }
    let vv = hard.voxel_volume();
    let mut soft = vec![0.0; k];
    for (i, v) in posterior.data().iter().enumerate() {
        soft[i % k] += v.as_f64();
    }
    let mut count = vec![0usize; k];
    for &l in &hard.labels {
        let c = ids
            .iter()
            .position(|&id| id == l)
            .ok_or_else(|| Error::InvalidInput(format!("label {l} has no posterior channel")))?;
        count[c] += 1;
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(c, &l)| VolumeRow {
            label: l,
            soft_mm3: soft[c] * vv,
            hard_mm3: count[c] as f64 * vv,
        })
        .collect())
}

/// Nearest-neighbour resampling of `src` onto `target` (world millimetres);
/// voxels falling outside `src` get label 0.
pub fn resample_labels_nearest(src: &LabelVolume, target: &Grid3) -> LabelVolume {
    let w2g = src.grid.world_to_grid();
    let d = src.grid.dims;
    let labels = (0..target.len())
        .map(|i| {
            let p = target.world(target.ijk(i).map(|v| v as f64));
            let q = crate::linalg::mat4_point(&w2g, p);
            let r = q.map(f64::round);
            if (0..3).all(|a| r[a] >= 0.0 && r[a] < d[a] as f64) {
                src.labels[src.grid.index(r[0] as usize, r[1] as usize, r[2] as usize)]
            } else {
                0
            }
        })
        .collect();
    LabelVolume {
        grid: *target,
        labels,
    }
}

/// Hard volumes only, for label maps without posteriors.
pub fn hard_volumes(labels: &LabelVolume, structures: &[u16]) -> Vec<(u16, f64)> {
    let vv = labels.voxel_volume();
    structures
        .iter()
        .map(|&s| {
            (
                s,
                labels.labels.iter().filter(|&&l| l == s).count() as f64 * vv,
            )
        })
        .collect()
}
