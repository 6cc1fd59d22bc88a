//! Seeded synthetic specimens with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::overlap::LabelVolume;
use crate::error::{Error, Result};
use crate::image::{Grid2, Image, Mask};
use crate::transform::Affine2D;
use crate::volume::{Grid3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Semi-axes of the brain in millimetres (x, y, z).
    pub radii_mm: [f64; 3],
    pub n_structures: usize,
    pub n_slices: usize,
    /// True distance between consecutive cuts.
    pub slice_spacing_mm: f64,
    /// Thickness reported to the reconstruction.
    pub nominal_thickness_mm: f64,
    pub photo_pixel_mm: f64,
    pub reference_voxel_mm: f64,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    /// Bound on each bilinear log-brightness coefficient.
    pub max_brightness: f64,
    pub noise_sd: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 1,
            radii_mm: [55.0, 45.0, 60.0],
            n_structures: 5,
            n_slices: 20,
            slice_spacing_mm: 4.0,
            nominal_thickness_mm: 4.0,
            photo_pixel_mm: 1.0,
            reference_voxel_mm: 2.0,
            max_rotation_deg: 10.0,
            max_translation_px: 15.0,
            max_brightness: 0.1,
            noise_sd: 0.02,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.slice_spacing_mm,
            self.nominal_thickness_mm,
            self.photo_pixel_mm,
            self.reference_voxel_mm,
        ];
        if !pos
            .iter()
            .chain(&self.radii_mm)
            .all(|v| *v > 0.0 && v.is_finite())
        {
            return Err(Error::InvalidInput("phantom sizes must be positive".into()));
        }
        if self.n_slices < 2 {
            return Err(Error::InvalidInput(
                "a phantom needs at least 2 slices".into(),
            ));
        }
        let extent = (self.n_slices - 1) as f64 * self.slice_spacing_mm * 0.5;
        if extent >= 0.9 * self.radii_mm[2] {
            return Err(Error::InvalidInput(format!(
                "slicing range ±{extent} mm leaves the brain (z radius {})",
                self.radii_mm[2]
            )));
        }
        let others = [
            self.max_rotation_deg,
            self.max_translation_px,
            self.max_brightness,
            self.noise_sd,
        ];
        if !others.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(
                "perturbation ranges must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Analytic specimen: a lumpy ellipsoid with ellipsoidal structures inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomShape {
    radii: [f64; 3],
    /// `(amplitude, frequency vector, phase)` of the surface modulation.
    bumps: Vec<(f64, [f64; 3], f64)>,
    structures: Vec<Ellipsoid>,
}

impl PhantomShape {
    pub(crate) fn random(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let bumps = (0..6)
            .map(|_| {
                let f = [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ];
                (
                    rng.random_range(0.02..0.05),
                    f,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let r = spec.radii_mm;
        let mut structures: Vec<Ellipsoid> = Vec::new();
        for s in 0..spec.n_structures {
            // every third structure nests inside its predecessor
            let e = if s % 3 == 2 {
                let parent = structures[s - 1].clone();
                Ellipsoid {
                    center: parent.center,
                    radii: parent.radii.map(|v| v * rng.random_range(0.45..0.6)),
                }
            } else {
                Ellipsoid {
                    center: [
                        rng.random_range(-0.45..0.45) * r[0],
                        rng.random_range(-0.45..0.45) * r[1],
                        rng.random_range(-0.45..0.45) * r[2],
                    ],
                    radii: [
                        rng.random_range(0.2..0.32) * r[0],
                        rng.random_range(0.2..0.32) * r[1],
                        rng.random_range(0.2..0.32) * r[2],
                    ],
                }
            };
            structures.push(e);
        }
        PhantomShape {
            radii: r,
            bumps,
            structures,
        }
    }

    pub fn radii(&self) -> [f64; 3] {
        self.radii
    }

    pub fn inside(&self, p: [f64; 3]) -> bool {
        let q = [
            p[0] / self.radii[0],
            p[1] / self.radii[1],
            p[2] / self.radii[2],
        ];
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if rho == 0.0 {
            return true;
        }
        let n = q.map(|v| v / rho);
        let g: f64 = 1.0
            + self
                .bumps
                .iter()
                .map(|(a, f, ph)| a * (f[0] * n[0] + f[1] * n[1] + f[2] * n[2] + ph).sin())
                .sum::<f64>();
        rho <= g
    }

    /// 0 outside, 1 for plain tissue, `2 + s` for structure `s` (later
    /// structures win).
    pub fn label(&self, p: [f64; 3]) -> u16 {
        if !self.inside(p) {
            return 0;
        }
        let mut l = 1;
        for (s, e) in self.structures.iter().enumerate() {
            if e.contains(p) {
                l = 2 + s as u16;
            }
        }
        l
    }

    pub fn n_labels(&self) -> usize {
        2 + self.structures.len()
    }
}

/// Photographs of a sliced phantom with everything needed to score a
/// reconstruction.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub shape: PhantomShape,
    /// RGB colour per label; index 0 is the photo background.
    pub colors: Vec<[f64; 3]>,
    pub labels: LabelVolume,
    /// Binary brain mask on the label grid.
    pub mask: Volume<f64>,
    /// Corrupted photographs and their true masks.
    pub photos: Vec<Image<f64>>,
    pub photo_masks: Vec<Mask<f64>>,
    /// Clean cross-sections on the photo grid.
    pub sections: Vec<Image<f64>>,
    /// World z of each cut.
    pub slice_z: Vec<f64>,
    /// Photo millimetres → section millimetres.
    pub transforms: Vec<Affine2D>,
    /// Log-brightness coefficients per slice and channel for `(1, u, v, uv)`.
    pub brightness: Vec<[[f64; 4]; 3]>,
}

/// Normalised in-plane coordinates in `[-1, 1]` of pixel `(col, row)`.
pub fn unit_coords(col: usize, row: usize, width: usize, height: usize) -> (f64, f64) {
    let half = |n: usize| ((n as f64 - 1.0) * 0.5).max(0.5);
    (
        (col as f64 - (width as f64 - 1.0) * 0.5) / half(width),
        (row as f64 - (height as f64 - 1.0) * 0.5) / half(height),
    )
}

#[inline]
pub fn bilinear_field(c: &[f64; 4], u: f64, v: f64) -> f64 {
    c[0] + c[1] * u + c[2] * v + c[3] * u * v
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = PhantomShape::random(spec, &mut rng);
    let nl = shape.n_labels();
    let mut colors = vec![[0.04, 0.05, 0.06]];
    for _ in 1..nl {
        colors.push([
            rng.random_range(0.35..0.9),
            rng.random_range(0.25..0.8),
            rng.random_range(0.2..0.75),
        ]);
    }

    // reference label grid
    let vs = spec.reference_voxel_mm;
    let dims = spec
        .radii_mm
        .map(|r| 2 * (1.25 * r / vs).ceil() as usize + 1);
    let grid = Grid3::centered(dims, [vs; 3])?;
    let labels: Vec<u16> = (0..grid.len())
        .map(|idx| {
            let ijk = grid.ijk(idx);
            shape.label(grid.world(ijk.map(|v| v as f64)))
        })
        .collect();
    let labels = LabelVolume::new(grid, labels)?;
    let mask = Volume::from_fn(grid, 1, |[i, j, k], _| {
        if labels.labels[grid.index(i, j, k)] > 0 {
            1.0
        } else {
            0.0
        }
    });

    // photo grid large enough for the brain under any perturbation
    let ps = spec.photo_pixel_mm;
    let reach = 1.2 * spec.radii_mm[0].max(spec.radii_mm[1])
        + spec.max_translation_px * ps * std::f64::consts::SQRT_2;
    let side = 2 * (reach / ps).ceil() as usize + 1;
    let pg = Grid2::new(side, side, ps)?;

    let n = spec.n_slices;
    let mut slice_z = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    let mut brightness = Vec::with_capacity(n);
    for k in 0..n {
        slice_z.push((k as f64 - (n as f64 - 1.0) * 0.5) * spec.slice_spacing_mm);
        let th = rng.random_range(-1.0..=1.0) * spec.max_rotation_deg.to_radians();
        let tx = rng.random_range(-1.0..=1.0) * spec.max_translation_px * ps;
        let ty = rng.random_range(-1.0..=1.0) * spec.max_translation_px * ps;
        transforms.push(Affine2D::rigid(th, tx, ty));
        let mut b = [[0.0; 4]; 3];
        for row in b.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..=1.0) * spec.max_brightness;
            }
        }
        brightness.push(b);
    }

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut photos = Vec::with_capacity(n);
    let mut photo_masks = Vec::with_capacity(n);
    let mut sections = Vec::with_capacity(n);
    for k in 0..n {
        let z = slice_z[k];
        let section_label = |mm: [f64; 2]| shape.label([mm[0], mm[1], z]);
        sections.push(Image::from_fn(pg, 3, |r, c, ch| {
            colors[section_label(pg.to_mm(c as f64, r as f64)) as usize][ch]
        }));
        let t = transforms[k];
        let b = brightness[k];
        let mut photo: Image<f64> = Image::from_fn(pg, 3, |r, c, ch| {
            let l = section_label(t.apply(pg.to_mm(c as f64, r as f64)));
            let (u, v) = unit_coords(c, r, pg.width, pg.height);
            colors[l as usize][ch] * bilinear_field(&b[ch], u, v).exp()
        });
        if spec.noise_sd > 0.0 {
            for v in photo.data_mut() {
                *v = (*v + noise.sample(&mut rng)).max(0.0);
            }
        }
        photos.push(photo);
        photo_masks.push(Mask::from_fn(pg, |r, c| {
            if section_label(t.apply(pg.to_mm(c as f64, r as f64))) > 0 {
                1.0
            } else {
                0.0
            }
        }));
    }
    Ok(Phantom {
        spec: spec.clone(),
        shape,
        colors,
        labels,
        mask,
        photos,
        photo_masks,
        sections,
        slice_z,
        transforms,
        brightness,
    })
}
