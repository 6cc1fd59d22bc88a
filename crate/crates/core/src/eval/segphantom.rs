//! Synthetic segmentation case: an atlas built from a blurred analytic
//! label map, labels drawn from that atlas, log intensities drawn from a
//! known mixture, and a per-slice bilinear brightness corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::overlap::LabelVolume;
use super::phantom::{PhantomShape, PhantomSpec};
use crate::error::{Error, Result};
use crate::resample::gaussian_blur_volume;
use crate::segment::{
    basis, AtlasPrior, BrightnessModel, GmmParams, LabelInfo, Mixture, BACKGROUND_GROUP_PREFIX,
};
use crate::volume::{Grid3, Volume};

/// Linear RGB of each class, cycled when there are more classes.
const PALETTE: [[f64; 3]; 8] = [
    [0.05, 0.05, 0.06],
    [0.62, 0.52, 0.45],
    [0.30, 0.22, 0.18],
    [0.55, 0.25, 0.50],
    [0.20, 0.45, 0.25],
    [0.65, 0.60, 0.15],
    [0.15, 0.25, 0.55],
    [0.40, 0.40, 0.40],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegPhantomSpec {
    pub seed: u64,
    pub radii_mm: [f64; 3],
    pub n_structures: usize,
    pub voxel_mm: f64,
    /// Blur applied to the analytic label map to form the atlas.
    pub prior_sigma_mm: f64,
    /// Standard deviation of each channel's log intensity.
    pub noise_sd: f64,
    /// Bound on `|field|` anywhere in a slice, in log units.
    pub max_brightness: f64,
}

impl Default for SegPhantomSpec {
    fn default() -> Self {
        SegPhantomSpec {
            seed: 7,
            radii_mm: [50.0, 42.0, 36.0],
            n_structures: 5,
            voxel_mm: 2.0,
            prior_sigma_mm: 2.0,
            noise_sd: 0.05,
            max_brightness: 0.1,
        }
    }
}

impl SegPhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = self
            .radii_mm
            .iter()
            .chain([&self.voxel_mm])
            .all(|v| *v > 0.0 && v.is_finite());
        let nonneg = [self.prior_sigma_mm, self.noise_sd, self.max_brightness]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if !pos || !nonneg {
            return Err(Error::InvalidInput(
                "segmentation phantom sizes must be positive and finite".into(),
            ));
        }
        if self.n_structures < 4 {
            return Err(Error::InvalidInput(
                "a segmentation phantom needs at least 4 structures (6 classes)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegPhantom {
    pub spec: SegPhantomSpec,
    pub shape: PhantomShape,
    pub atlas: AtlasPrior,
    /// Class drawn at every voxel, stored as label ids.
    pub labels: LabelVolume,
    /// Intensities in `[0, 1]`, three channels.
    pub volume: Volume<f64>,
    /// Analytic brain region.
    pub mask: Volume<f64>,
    /// Generating mixture (one component per class).
    pub gmm: GmmParams,
    pub field: BrightnessModel,
}

/// Probabilistic atlas from the analytic label map of `shape`: one-hot
/// labels blurred by `prior_sigma_mm` and renormalised, on a centred grid
/// wide enough that the tissue prior has died out at the border.
pub fn atlas_from_shape(
    shape: &PhantomShape,
    voxel_mm: f64,
    prior_sigma_mm: f64,
) -> Result<AtlasPrior> {
    let k = shape.n_labels();
    let vs = voxel_mm;
    let dims = shape
        .radii()
        .map(|r| 2 * ((1.15 * r + 3.0 * prior_sigma_mm) / vs).ceil() as usize + 1);
    let grid = Grid3::centered(dims, [vs; 3])?;
    let truth: Vec<usize> = (0..grid.len())
        .map(|i| shape.label(grid.world(grid.ijk(i).map(|v| v as f64))) as usize)
        .collect();
    let onehot: Volume<f64> = Volume::from_fn(grid, k, |ijk, c| {
        f64::from(truth[grid.index(ijk[0], ijk[1], ijk[2])] == c)
    });
    let mut prob = gaussian_blur_volume(&onehot, [prior_sigma_mm / vs; 3]).into_data();
    for row in prob.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        if s > 1e-12 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    let labels: Vec<LabelInfo> = (0..k)
        .map(|c| {
            let name = if c == 0 {
                BACKGROUND_GROUP_PREFIX.to_string()
            } else {
                format!("class{c}")
            };
            LabelInfo {
                id: c as u16,
                name: name.clone(),
                gmm_group: name,
            }
        })
        .collect();
    AtlasPrior::new(
        Volume::new(grid, k, prob.iter().map(|&v| v as f32).collect())?,
        labels,
        10.0,
    )
}

pub fn make_seg_phantom(spec: &SegPhantomSpec) -> Result<SegPhantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape_spec = PhantomSpec {
        seed: spec.seed,
        radii_mm: spec.radii_mm,
        n_structures: spec.n_structures,
        ..PhantomSpec::default()
    };
    let shape = PhantomShape::random(&shape_spec, &mut rng);
    let k = shape.n_labels();

    let atlas = atlas_from_shape(&shape, spec.voxel_mm, spec.prior_sigma_mm)?;
    let grid = *atlas.prob.grid();
    let dims = grid.dims;
    let prob: Vec<f64> = atlas.prob.data().iter().map(|&v| v as f64).collect();

    let groups = (0..k)
        .map(|c| {
            let mean = PALETTE[c % PALETTE.len()].map(f64::ln).to_vec();
            let mut cov = vec![0.0; 9];
            (0..3).for_each(|d| cov[d * 4] = spec.noise_sd * spec.noise_sd);
            Mixture {
                weights: vec![1.0],
                means: vec![mean],
                covs: vec![cov],
            }
        })
        .collect();
    let gmm = GmmParams {
        channels: 3,
        class_group: (0..k).collect(),
        groups,
    };

    let b = spec.max_brightness / 4.0;
    let coeffs = (0..dims[2] * 3)
        .map(|_| [0; 4].map(|_| rng.random_range(-b..=b)))
        .collect();
    let field = BrightnessModel {
        n_slices: dims[2],
        channels: 3,
        coeffs,
    };

    let mut drawn = vec![0u16; grid.len()];
    let mut data = vec![0.0; grid.len() * 3];
    for i in 0..grid.len() {
        let p = &prob[i * k..(i + 1) * k];
        let mut t: f64 = rng.random();
        let mut c = k - 1;
        for (j, &pj) in p.iter().enumerate() {
            if t < pj {
                c = j;
                break;
            }
            t -= pj;
        }
        drawn[i] = c as u16;
        let [x, y, z] = grid.ijk(i);
        let bs = basis(x, y, dims[0], dims[1]);
        let mean = &gmm.groups[c].means[0];
        for ch in 0..3 {
            let n: f64 = StandardNormal.sample(&mut rng);
            data[i * 3 + ch] = (mean[ch] + spec.noise_sd * n + field.value(z, ch, &bs))
                .exp()
                .min(1.0);
        }
    }

    let mask = Volume::from_fn(grid, 1, |ijk, _| {
        f64::from(shape.inside(grid.world(ijk.map(|v| v as f64))))
    });
    Ok(SegPhantom {
        spec: spec.clone(),
        shape,
        atlas,
        labels: LabelVolume::new(grid, drawn)?,
        volume: Volume::new(grid, 3, data)?,
        mask,
        gmm,
        field,
    })
}

/// RMS difference of two fields over the voxels where `mask ≥ 0.5`, after
/// removing the best constant offset per channel (the mixture means absorb
/// a global shift).
pub fn field_rms_after_gauge(
    est: &BrightnessModel,
    truth: &BrightnessModel,
    mask: &Volume<f64>,
) -> Result<f64> {
    if est.n_slices != truth.n_slices || est.channels != truth.channels {
        return Err(Error::GridMismatch(
            "brightness fields differ in shape".into(),
        ));
    }
    let grid = *mask.grid();
    let a = est.render(grid)?;
    let b = truth.render(grid)?;
    let ch = est.channels;
    let inside: Vec<usize> = (0..grid.len()).filter(|&i| mask.data()[i] >= 0.5).collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask("field comparison mask is empty".into()));
    }
    let n = inside.len() as f64;
    let mut total = 0.0;
    for c in 0..ch {
        let diff: Vec<f64> = inside
            .iter()
            .map(|&i| a.data()[i * ch + c] - b.data()[i * ch + c])
            .collect();
        let off = crate::reduce::compensated_sum(diff.iter().copied()) / n;
        total += crate::reduce::compensated_sum(diff.iter().map(|d| (d - off) * (d - off)));
    }
    Ok((total / (n * ch as f64)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegPhantomSpec {
        SegPhantomSpec {
            radii_mm: [24.0, 20.0, 16.0],
            voxel_mm: 2.0,
            ..SegPhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = make_seg_phantom(&small()).unwrap();
        let b = make_seg_phantom(&small()).unwrap();
        assert_eq!(a.volume.data(), b.volume.data());
        assert_eq!(a.labels.labels, b.labels.labels);
        a.atlas.validate().unwrap();
        a.gmm.validate().unwrap();
        assert!(a.atlas.n_classes() >= 6);
        assert!(a.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn field_rms_ignores_constant_offset() {
        let g = Grid3::centered([5, 4, 2], [1.0; 3]).unwrap();
        let mut t = BrightnessModel::zeros(2, 2);
        t.coeffs[1] = [0.0, 0.05, -0.02, 0.01];
        let mut e = t.clone();
        e.coeffs.iter_mut().step_by(2).for_each(|c| c[0] += 0.3);
        let m = Volume::from_fn(g, 1, |_, _| 1.0);
        assert!(field_rms_after_gauge(&e, &t, &m).unwrap() < 1e-12);
        e.coeffs[3][1] += 0.1;
        assert!(field_rms_after_gauge(&e, &t, &m).unwrap() > 0.01);
    }
}
