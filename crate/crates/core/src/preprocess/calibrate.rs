use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid2, Image};
use crate::interp::bilinear;
use crate::resample::{antialias_factor, box_blur_image};
use crate::scalar::Real;
use crate::transform::Affine2D;

/// Physical layout of the three ruler landmarks: point 0 is the corner,
/// point 1 lies `d1_mm` along the first segment, point 2 lies `d2_mm`
/// along the second, `angle_deg` away from the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulerSpec {
    pub d1_mm: f64,
    pub d2_mm: f64,
    pub angle_deg: f64,
}

impl Default for RulerSpec {
    fn default() -> Self {
        RulerSpec {
            d1_mm: 10.0,
            d2_mm: 10.0,
            angle_deg: 90.0,
        }
    }
}

impl RulerSpec {
    pub fn ideal_positions(&self) -> [[f64; 2]; 3] {
        let a = self.angle_deg.to_radians();
        [
            [0.0, 0.0],
            [self.d1_mm, 0.0],
            [self.d2_mm * a.cos(), self.d2_mm * a.sin()],
        ]
    }
}

/// Three `[x, y]` pixel positions on a raw photograph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [[f64; 2]; 3],
    #[serde(default)]
    pub ruler: RulerSpec,
}

impl LandmarkSet {
    pub fn triangle_area(&self) -> f64 {
        let [a, b, c] = self.points;
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.ruler;
        if !(r.d1_mm > 0.0 && r.d2_mm > 0.0) {
            return Err(Error::InvalidInput(
                "ruler distances must be positive".into(),
            ));
        }
        if !(r.angle_deg.to_radians().sin().abs() > 1e-6) {
            return Err(Error::DegenerateLandmarks(
                "ruler segments are parallel".into(),
            ));
        }
        if !self.points.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "landmark coordinates must be finite".into(),
            ));
        }
        let area = self.triangle_area();
        if area <= 1.0 {
            return Err(Error::DegenerateLandmarks(format!(
                "landmark triangle area {area:.3} px² is not above 1 px²"
            )));
        }
        Ok(())
    }

    /// Affine taking raw pixel `[x, y]` to ruler millimetres.
    pub fn fit(&self) -> Result<LandmarkFit> {
        self.validate()?;
        let src = self.points;
        let dst = self.ruler.ideal_positions();
        // solve [x y 1]·[a b; c d; e f] = dst for the three pairs
        let m = nalgebra::Matrix3::new(
            src[0][0], src[0][1], 1.0, src[1][0], src[1][1], 1.0, src[2][0], src[2][1], 1.0,
        );
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::DegenerateLandmarks("landmarks are collinear".into()))?;
        let bx = nalgebra::Vector3::new(dst[0][0], dst[1][0], dst[2][0]);
        let by = nalgebra::Vector3::new(dst[0][1], dst[1][1], dst[2][1]);
        let cx = inv * bx;
        let cy = inv * by;
        let pixel_to_mm = Affine2D {
            params: [cx[0], cx[1], cy[0], cy[1], cx[2], cy[2]],
        };
        let det = pixel_to_mm.det();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::DegenerateLandmarks(
                "fitted transform is singular".into(),
            ));
        }
        Ok(LandmarkFit {
            pixel_to_mm,
            pixel_size_mm: det.abs().sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFit {
    /// Raw pixel `[x, y]` → ruler-frame millimetres.
    pub pixel_to_mm: Affine2D,
    /// Geometric-mean pixel size of the raw photograph.
    pub pixel_size_mm: f64,
}

#[derive(Debug, Clone)]
pub struct CalibratedPhoto<T> {
    pub image: Image<T>,
    pub fit: LandmarkFit,
    /// Ruler-frame millimetre position of output pixel (0, 0).
    pub origin_mm: [f64; 2],
}

impl<T: Real> CalibratedPhoto<T> {
    /// Raw pixel `[x, y]` → calibrated pixel `[col, row]`.
    pub fn map_raw_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let mm = self.fit.pixel_to_mm.apply(p);
        let ps = self.image.pixel_size();
        [
            (mm[0] - self.origin_mm[0]) / ps,
            (mm[1] - self.origin_mm[1]) / ps,
        ]
    }
}

/// Correct pixel size and affine distortion from three ruler landmarks and
/// resample onto an isotropic grid of `archive_pixel_size` millimetres.
pub fn calibrate_photo<T: Real>(
    raw: &Image<T>,
    lm: &LandmarkSet,
    archive_pixel_size: f64,
) -> Result<CalibratedPhoto<T>> {
    if !(archive_pixel_size > 0.0) {
        return Err(Error::InvalidInput(
            "archive pixel size must be positive".into(),
        ));
    }
    let fit = lm.fit()?;
    let to_mm = fit.pixel_to_mm;
    let to_px = to_mm.inverse()?;
    let (w, h) = (raw.width() as f64, raw.height() as f64);
    let corners = [
        [-0.5, -0.5],
        [w - 0.5, -0.5],
        [-0.5, h - 0.5],
        [w - 0.5, h - 0.5],
    ]
    .map(|p| to_mm.apply(p));
    let xmin = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let xmax = corners
        .iter()
        .map(|c| c[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let ymin = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let ymax = corners
        .iter()
        .map(|c| c[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let ps = archive_pixel_size;
    let origin = [xmin + 0.5 * ps, ymin + 0.5 * ps];
    let out_w = (((xmax - xmin) / ps).round() as usize).max(1);
    let out_h = (((ymax - ymin) / ps).round() as usize).max(1);
    let grid = Grid2::new(out_w, out_h, ps)?;

    let factor = antialias_factor(fit.pixel_size_mm, ps);
    let src = box_blur_image(raw, factor);
    let ch = raw.channels();
    let mut val = vec![0.0; ch];
    let image = Image::from_fn(grid, ch, |r, c, k| {
        if k == 0 {
            let mm = [origin[0] + c as f64 * ps, origin[1] + r as f64 * ps];
            let p = to_px.apply(mm);
            bilinear(
                src.data(),
                src.width(),
                src.height(),
                ch,
                p[0],
                p[1],
                &mut val,
            );
        }
        val[k]
    });
    Ok(CalibratedPhoto {
        image,
        fit,
        origin_mm: origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(points: [[f64; 2]; 3]) -> LandmarkSet {
        LandmarkSet {
            points,
            ruler: RulerSpec::default(),
        }
    }

    #[test]
    fn collinear_landmarks_rejected() {
        let l = lm([[0.0, 0.0], [10.0, 10.0], [20.0, 20.2]]);
        assert!(matches!(l.fit(), Err(Error::DegenerateLandmarks(_))));
    }

    #[test]
    fn fifty_pixel_ruler_gives_fifth_of_a_millimetre() {
        let l = lm([[100.0, 100.0], [150.0, 100.0], [100.0, 150.0]]);
        let fit = l.fit().unwrap();
        assert!((fit.pixel_size_mm - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fit_maps_landmarks_to_ideal_positions() {
        let l = lm([[12.0, 30.0], [61.0, 41.0], [3.0, 77.0]]);
        let fit = l.fit().unwrap();
        for (p, q) in l.points.iter().zip(l.ruler.ideal_positions()) {
            let m = fit.pixel_to_mm.apply(*p);
            assert!((m[0] - q[0]).abs() < 1e-10 && (m[1] - q[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn ideal_landmarks_give_pure_rescale() {
        // 1 px = 1 mm already; archive at 1 mm must reproduce the input
        let g = Grid2::new(16, 12, 1.0).unwrap();
        let raw: Image<f64> = Image::from_fn(g, 1, |r, c, _| (r * 16 + c) as f64);
        let l = lm([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]);
        let out = calibrate_photo(&raw, &l, 1.0).unwrap();
        assert_eq!(out.image.width(), 16);
        assert_eq!(out.image.height(), 12);
        for (a, b) in out.image.data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let p = out.map_raw_pixel([3.0, 4.0]);
        assert!((p[0] - 3.0).abs() < 1e-9 && (p[1] - 4.0).abs() < 1e-9);
    }

    fn pattern(mm: [f64; 2]) -> f64 {
        0.5 + 0.25 * (mm[0] * 0.35).sin() + 0.25 * (mm[1] * 0.27).cos()
    }

    #[test]
    fn sheared_photo_is_recovered() {
        // raw pixel -> mm, with shear and anisotropic scale
        let truth = Affine2D {
            params: [0.21, 0.04, -0.03, 0.18, -4.0, -3.0],
        };
        let to_px = truth.inverse().unwrap();
        let g = Grid2::new(220, 200, 1.0).unwrap();
        let raw: Image<f64> =
            Image::from_fn(g, 1, |r, c, _| pattern(truth.apply([c as f64, r as f64])));
        let ideal = RulerSpec::default().ideal_positions();
        let l = lm(ideal.map(|q| to_px.apply(q)));
        let out = calibrate_photo(&raw, &l, 0.1).unwrap();
        let ps = out.image.pixel_size();
        let (mut err, mut n) = (0.0, 0.0);
        for r in 0..out.image.height() {
            for c in 0..out.image.width() {
                let mm = [
                    out.origin_mm[0] + c as f64 * ps,
                    out.origin_mm[1] + r as f64 * ps,
                ];
                let p = to_px.apply(mm);
                // interior of the raw photo only
                if p[0] < 3.0 || p[1] < 3.0 || p[0] > 216.0 || p[1] > 196.0 {
                    continue;
                }
                err += (out.image.get(r, c, 0) - pattern(mm)).abs();
                n += 1.0;
            }
        }
        assert!(n > 1000.0);
        assert!(err / n < 0.01, "mean abs error {}", err / n);
    }

    proptest::proptest! {
        #[test]
        fn landmarks_recovered_under_affine_corruption(
            a in 0.05f64..0.5, b in -0.1f64..0.1, c in -0.1f64..0.1, d in 0.05f64..0.5,
            tx in -20.0f64..20.0, ty in -20.0f64..20.0,
        ) {
            let truth = Affine2D { params: [a, b, c, d, tx, ty] };
            proptest::prop_assume!(truth.det().abs() > 1e-3);
            let to_px = truth.inverse().unwrap();
            let ideal = RulerSpec::default().ideal_positions();
            let pts = ideal.map(|q| to_px.apply(q));
            let l = lm(pts);
            proptest::prop_assume!(l.validate().is_ok());
            let g = Grid2::new(8, 8, 1.0).unwrap();
            let raw: Image<f64> = Image::zeros(g, 1);
            let out = calibrate_photo(&raw, &l, 0.1).unwrap();
            let ps = out.image.pixel_size();
            for (p, q) in pts.iter().zip(ideal) {
                let got = out.map_raw_pixel(*p);
                let want = [(q[0] - out.origin_mm[0]) / ps, (q[1] - out.origin_mm[1]) / ps];
                proptest::prop_assert!((got[0] - want[0]).hypot(got[1] - want[1]) < 0.5);
            }
        }
    }
}
