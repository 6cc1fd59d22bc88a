//! Small fixed-size matrix helpers (row-major arrays).

use nalgebra::{Matrix3, Matrix4};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const IDENTITY4: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[inline]
pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn mat3_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn mat3_inverse(a: &Mat3) -> Option<Mat3> {
    let m = Matrix3::from_fn(|i, j| a[i][j]);
    let inv = m.try_inverse()?;
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = inv[(i, j)];
        }
    }
    Some(out)
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat4_inverse(a: &Mat4) -> Option<Mat4> {
    let m = Matrix4::from_fn(|i, j| a[i][j]);
    let inv = m.try_inverse()?;
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = inv[(i, j)];
        }
    }
    Some(out)
}

#[inline]
pub fn mat4_point(a: &Mat4, p: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * p[0] + a[0][1] * p[1] + a[0][2] * p[2] + a[0][3],
        a[1][0] * p[0] + a[1][1] * p[1] + a[1][2] * p[2] + a[1][3],
        a[2][0] * p[0] + a[2][1] * p[1] + a[2][2] * p[2] + a[2][3],
    ]
}

pub fn linear_part(a: &Mat4) -> Mat3 {
    [
        [a[0][0], a[0][1], a[0][2]],
        [a[1][0], a[1][1], a[1][2]],
        [a[2][0], a[2][1], a[2][2]],
    ]
}

pub fn from_linear_translation(l: &Mat3, t: [f64; 3]) -> Mat4 {
    [
        [l[0][0], l[0][1], l[0][2], t[0]],
        [l[1][0], l[1][1], l[1][2], t[1]],
        [l[2][0], l[2][1], l[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Symmetric square root and inverse square root of an SPD 3x3 matrix.
pub fn sym_sqrt_pair(a: &Mat3) -> Option<(Mat3, Mat3)> {
    let m = Matrix3::from_fn(|i, j| 0.5 * (a[i][j] + a[j][i]));
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let mut s = [[0.0; 3]; 3];
    let mut si = [[0.0; 3]; 3];
    for k in 0..3 {
        let l = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += l.sqrt() * v[i] * v[j];
                si[i][j] += v[i] * v[j] / l.sqrt();
            }
        }
    }
    Some((s, si))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_sqrt() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let inv = mat3_inverse(&a).unwrap();
        let id = mat3_mul(&a, &inv);
        for i in 0..3 {
            for j in 0..3 {
                assert!((id[i][j] - IDENTITY3[i][j]).abs() < 1e-12);
            }
        }
        let (s, si) = sym_sqrt_pair(&a).unwrap();
        let sq = mat3_mul(&s, &s);
        let id2 = mat3_mul(&s, &si);
        for i in 0..3 {
            for j in 0..3 {
                assert!((sq[i][j] - a[i][j]).abs() < 1e-12);
                assert!((id2[i][j] - IDENTITY3[i][j]).abs() < 1e-12);
            }
        }
        assert!((mat3_det(&a) - (4.0 * 5.75 - 1.0 * 2.0)).abs() < 1e-12);
    }
}
