//! Geometric transforms.
//!
//! [`Affine2D`] maps centred millimetre coordinates of an output grid into
//! centred millimetre coordinates of the source slice (a pull-back, as used
//! by resampling). [`Rigid3DScale`] relates the stack frame to the reference
//! frame; see its docs for the exact convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mat3_mul, mat3_transpose, mat3_vec, Mat3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    /// `[a11, a12, a21, a22, tx, ty]`
    pub params: [f64; 6],
}

impl Default for Affine2D {
    fn default() -> Self {
        Affine2D::identity()
    }
}

impl Affine2D {
    pub fn new(params: [f64; 6]) -> Result<Self> {
        let t = Affine2D { params };
        if !params.iter().all(|v| v.is_finite()) || t.det() == 0.0 {
            return Err(Error::NonInvertible);
        }
        Ok(t)
    }

    pub const fn identity() -> Self {
        Affine2D {
            params: [1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2D {
            params: [1.0, 0.0, 0.0, 1.0, tx, ty],
        }
    }

    /// Rotation by `angle` radians followed by a translation.
    pub fn rigid(angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Affine2D {
            params: [c, -s, s, c, tx, ty],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Affine2D {
            params: [sx, 0.0, 0.0, sy, 0.0, 0.0],
        }
    }

    #[inline]
    pub fn det(&self) -> f64 {
        let p = &self.params;
        p[0] * p[3] - p[1] * p[2]
    }

    #[inline]
    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        let p = &self.params;
        [
            p[0] * x[0] + p[1] * x[1] + p[4],
            p[2] * x[0] + p[3] * x[1] + p[5],
        ]
    }

    #[inline]
    pub fn apply_linear(&self, x: [f64; 2]) -> [f64; 2] {
        let p = &self.params;
        [p[0] * x[0] + p[1] * x[1], p[2] * x[0] + p[3] * x[1]]
    }

    pub fn inverse(&self) -> Result<Affine2D> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return Err(Error::NonInvertible);
        }
        let p = &self.params;
        let (a, b, c, e) = (p[3] / d, -p[1] / d, -p[2] / d, p[0] / d);
        let tx = -(a * p[4] + b * p[5]);
        let ty = -(c * p[4] + e * p[5]);
        Ok(Affine2D {
            params: [a, b, c, e, tx, ty],
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2D) -> Affine2D {
        let a = &self.params;
        let b = &other.params;
        let t = self.apply([b[4], b[5]]);
        Affine2D {
            params: [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
                t[0],
                t[1],
            ],
        }
    }

    /// Max-abs deviation of `LᵀL` from the identity, where `L` is the linear part.
    pub fn orthonormality_error(&self) -> f64 {
        let p = &self.params;
        let m00 = p[0] * p[0] + p[2] * p[2] - 1.0;
        let m01 = p[0] * p[1] + p[2] * p[3];
        let m11 = p[1] * p[1] + p[3] * p[3] - 1.0;
        m00.abs().max(m01.abs()).max(m11.abs())
    }
}

/// Rigid motion with an extra scale along the stacking axis.
///
/// For a point `p` in the stack frame (nominal slice spacing) the
/// corresponding reference point is `Rᵀ (S p - t)`, with
/// `S = diag(1, 1, z_scale)` and `R = Rz·Ry·Rx` built from `angles`. The
/// forward map takes the reference into the stack: `p = S⁻¹ (R q + t)`, so
/// `translation` moves the reference and `z_scale` is the ratio of true to
/// nominal slice spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid3DScale {
    /// Euler angles about x, y, z in radians.
    pub angles: [f64; 3],
    /// Millimetres.
    pub translation: [f64; 3],
    pub z_scale: f64,
}

impl Default for Rigid3DScale {
    fn default() -> Self {
        Rigid3DScale::identity()
    }
}

pub(crate) fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub(crate) fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub(crate) fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

impl Rigid3DScale {
    pub const fn identity() -> Self {
        Rigid3DScale {
            angles: [0.0; 3],
            translation: [0.0; 3],
            z_scale: 1.0,
        }
    }

    pub fn new(angles: [f64; 3], translation: [f64; 3], z_scale: f64) -> Result<Self> {
        if !(z_scale > 0.0 && z_scale.is_finite())
            || !angles.iter().chain(&translation).all(|v| v.is_finite())
        {
            return Err(Error::NonInvertible);
        }
        Ok(Rigid3DScale {
            angles,
            translation,
            z_scale,
        })
    }

    pub fn rotation(&self) -> Mat3 {
        let [ax, ay, az] = self.angles;
        mat3_mul(&rot_z(az), &mat3_mul(&rot_y(ay), &rot_x(ax)))
    }

    /// Derivatives of `R` with respect to each Euler angle.
    pub fn rotation_derivatives(&self) -> [Mat3; 3] {
        let [ax, ay, az] = self.angles;
        let (rx, ry, rz) = (rot_x(ax), rot_y(ay), rot_z(az));
        [
            mat3_mul(&rz, &mat3_mul(&ry, &drot_x(ax))),
            mat3_mul(&rz, &mat3_mul(&drot_y(ay), &rx)),
            mat3_mul(&drot_z(az), &mat3_mul(&ry, &rx)),
        ]
    }

    /// Stack point → reference point.
    #[inline]
    pub fn to_reference(&self, p: [f64; 3]) -> [f64; 3] {
        let rt = mat3_transpose(&self.rotation());
        let t = &self.translation;
        mat3_vec(&rt, [p[0] - t[0], p[1] - t[1], self.z_scale * p[2] - t[2]])
    }

    /// Reference point → stack point.
    pub fn to_stack(&self, q: [f64; 3]) -> [f64; 3] {
        let r = mat3_vec(&self.rotation(), q);
        let t = &self.translation;
        [r[0] + t[0], r[1] + t[1], (r[2] + t[2]) / self.z_scale]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_inverse_and_compose() {
        let a = Affine2D::new([1.2, 0.3, -0.1, 0.9, 4.0, -2.0]).unwrap();
        let id = a.compose(&a.inverse().unwrap());
        for (x, y) in id.params.iter().zip(Affine2D::identity().params) {
            assert!((x - y).abs() < 1e-12);
        }
        let p = [3.0, -7.0];
        let q = a.inverse().unwrap().apply(a.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn singular_affine_rejected() {
        assert_eq!(
            Affine2D::new([1.0, 2.0, 2.0, 4.0, 0.0, 0.0]),
            Err(Error::NonInvertible)
        );
    }

    #[test]
    fn rigid_is_orthonormal() {
        assert!(Affine2D::rigid(0.7, 1.0, 2.0).orthonormality_error() < 1e-15);
        assert!((Affine2D::rigid(0.7, 1.0, 2.0).det() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rigid3_round_trip() {
        let t = Rigid3DScale::new([0.1, -0.2, 0.3], [1.0, 2.0, -3.0], 1.25).unwrap();
        let p = [4.0, -5.0, 6.0];
        let q = t.to_stack(t.to_reference(p));
        for a in 0..3 {
            assert!((p[a] - q[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_derivatives_match_differences() {
        let t = Rigid3DScale::new([0.3, -0.4, 0.8], [0.0; 3], 1.0).unwrap();
        let d = t.rotation_derivatives();
        let h = 1e-6;
        for a in 0..3 {
            let mut tp = t;
            tp.angles[a] += h;
            let mut tm = t;
            tm.angles[a] -= h;
            let (rp, rm) = (tp.rotation(), tm.rotation());
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                    assert!((fd - d[a][i][j]).abs() < 1e-8);
                }
            }
        }
    }
}
