//! Synthetic case directories: photographs of a sliced analytic specimen,
//! the annotations an operator would have made, a reference volume, an
//! atlas and the true label map.

use std::collections::BTreeMap;
use std::path::Path;

use photovol::eval::{atlas_from_shape, make_phantom, PhantomSpec};
use photovol::image::Mask;
use photovol::preprocess::LandmarkSet;
use photovol::resample::gaussian_blur_volume;
use photovol::Affine2D;
use serde::Serialize;

use crate::case::{to_json, Case, LANDMARKS, ORDER, SEEDS};
use crate::config::CASE_CONFIG;
use crate::error::{self, Result};
use crate::imageio::write_rgb16;
use crate::nifti::{write_volume, Nifti};
use crate::stages::write_atlas;

/// Pixel offset of the ruler origin in every synthetic photo.
const RULER_OFFSET_PX: f64 = 8.0;
const ATLAS_VOXEL_MM: f64 = 2.0;
const ATLAS_SIGMA_MM: f64 = 2.0;
const SOFT_REFERENCE_SIGMA_MM: f64 = 4.0;

#[derive(Debug, Clone, Serialize)]
pub struct PhantomTruth {
    pub spec: PhantomSpec,
    /// Photo names in anatomical order.
    pub photos: Vec<String>,
    pub slice_z: Vec<f64>,
    pub transforms: Vec<Affine2D>,
    pub brightness: Vec<[[f64; 4]; 3]>,
}

/// Pixel `[col, row]` farthest (in city-block distance) from the outside
/// of the mask.
pub fn deepest_pixel(m: &Mask<f64>) -> Option<[f64; 2]> {
    let (w, h) = (m.width(), m.height());
    let big = w + h;
    let mut d: Vec<usize> = m
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { big } else { 0 })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if d[i] == 0 {
                continue;
            }
            let up = if r > 0 { d[i - w] } else { 0 };
            let left = if c > 0 { d[i - 1] } else { 0 };
            d[i] = d[i].min(up + 1).min(left + 1);
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let i = r * w + c;
            let down = if r + 1 < h { d[i + w] } else { 0 };
            let right = if c + 1 < w { d[i + 1] } else { 0 };
            d[i] = d[i].min(down + 1).min(right + 1);
        }
    }
    let (best, &dist) = d
        .iter()
        .enumerate()
        .max_by_key(|(i, v)| (**v, std::cmp::Reverse(*i)))?;
    (dist > 0).then(|| [(best % w) as f64, (best / w) as f64])
}

/// Photo file names are assigned by a fixed stride so that sorted file
/// order differs from anatomical order.
fn photo_names(n: usize) -> Vec<String> {
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    let stride = (7..)
        .find(|s| gcd(*s, n) == 1)
        .expect("a coprime stride exists");
    (0..n)
        .map(|i| format!("photo_{:02}.png", (i * stride + 5) % n))
        .collect()
}

/// Write a complete synthetic case to `dir`.
pub fn write_phantom_case(dir: &Path, spec: &PhantomSpec) -> Result<PhantomTruth> {
    let p = make_phantom(spec)?;
    let names = photo_names(spec.n_slices);
    let ps = spec.photo_pixel_mm;
    let ruler = photovol::preprocess::RulerSpec::default();
    let points = ruler
        .ideal_positions()
        .map(|[x, y]| [x / ps + RULER_OFFSET_PX, y / ps + RULER_OFFSET_PX]);

    let mut landmarks = BTreeMap::new();
    let mut seeds = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        write_rgb16(&dir.join("photos").join(name), &p.photos[i])?;
        landmarks.insert(name.clone(), LandmarkSet { points, ruler });
        let seed = deepest_pixel(&p.photo_masks[i])
            .ok_or_else(|| photovol::Error::EmptyMask(format!("phantom slice {i}")))?;
        seeds.insert(name.clone(), seed);
    }
    error::write(&dir.join(LANDMARKS), &to_json(&landmarks))?;
    error::write(&dir.join(SEEDS), &to_json(&seeds))?;
    error::write(&dir.join(ORDER), &to_json(&names))?;

    write_volume(&dir.join("reference.nii"), &p.mask.convert::<f32>())?;
    let sigma = SOFT_REFERENCE_SIGMA_MM / spec.reference_voxel_mm;
    let soft = gaussian_blur_volume(&p.mask, [sigma; 3]).map(|v| v.clamp(0.0, 1.0));
    write_volume(&dir.join("reference_soft.nii"), &soft.convert::<f32>())?;
    Nifti::from_labels(&p.labels)?.write(&dir.join("truth").join("labels.nii"))?;
    let atlas = atlas_from_shape(&p.shape, ATLAS_VOXEL_MM, ATLAS_SIGMA_MM)?;
    write_atlas(&dir.join("atlas"), &atlas)?;

    let config = format!(
        "[calibrate]\narchive_pixel_mm = {ps:?}\n\n[stack]\nthickness_mm = {:?}\nrecon_resolution_mm = 1.5\n\n\
         [segment]\natlas = \"atlas/atlas.nii\"\n\n[evaluate]\ntruth = \"truth/labels.nii\"\n",
        spec.nominal_thickness_mm
    );
    error::write(&dir.join(CASE_CONFIG), config.as_bytes())?;

    let truth = PhantomTruth {
        spec: spec.clone(),
        photos: names,
        slice_z: p.slice_z,
        transforms: p.transforms,
        brightness: p.brightness,
    };
    error::write(&dir.join("phantom.json"), &to_json(&truth))?;
    Case::open(dir)?;
    Ok(truth)
}
