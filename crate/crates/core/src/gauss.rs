//! Multivariate normal densities for small dimensions (1–3 channels).
//! Matrices are dense row-major `dim × dim` slices.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor, or `None` if `a` is not SPD.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn spd_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // invert L, then A⁻¹ = L⁻ᵀ L⁻¹
    let mut li = vec![0.0; n * n];
    for i in 0..n {
        li[i * n + i] = 1.0 / l[i * n + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * li[k * n + j];
            }
            li[i * n + j] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in i.max(j)..n {
                s += li[k * n + i] * li[k * n + j];
            }
            inv[i * n + j] = s;
        }
    }
    inv
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    dim: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim || dim == 0 {
            return Err(Error::InvalidInput(
                "covariance shape does not match mean".into(),
            ));
        }
        let chol = cholesky(&cov, dim)
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let log_det: f64 = (0..dim).map(|i| 2.0 * chol[i * dim + i].ln()).sum();
        let log_norm = -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det);
        Ok(Gaussian {
            dim,
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    /// Squared Mahalanobis distance of `x - offset` from the mean.
    #[inline]
    pub fn mahalanobis2(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let mut z = [0.0f64; 8];
        let mut q = 0.0;
        for i in 0..n {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i * n + k] * z[k];
            }
            z[i] = s / self.chol[i * n + i];
            q += z[i] * z[i];
        }
        q
    }

    #[inline]
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis2(x)
    }

    pub fn precision(&self) -> Vec<f64> {
        spd_inverse(&self.chol, self.dim)
    }
}

/// `log Σ exp(v)` with the max-shift.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_density() {
        let g = Gaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert!((g.log_pdf(&[0.0]) - (-(2.0 * PI).sqrt().ln())).abs() < 1e-14);
    }

    #[test]
    fn inverse_matches() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let l = cholesky(&a, 3).unwrap();
        let inv = spd_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn full_covariance_density_matches_closed_form() {
        let cov = vec![2.0, 0.3, 0.3, 1.0];
        let g = Gaussian::new(vec![1.0, -1.0], cov.clone()).unwrap();
        let x = [0.2, 0.4];
        let det = 2.0 * 1.0 - 0.09;
        let inv = [1.0 / det, -0.3 / det, -0.3 / det, 2.0 / det];
        let d = [x[0] - 1.0, x[1] + 1.0];
        let q = d[0] * (inv[0] * d[0] + inv[1] * d[1]) + d[1] * (inv[2] * d[0] + inv[3] * d[1]);
        let expect = -0.5 * q - (2.0 * PI).ln() - 0.5 * det.ln();
        assert!((g.log_pdf(&x) - expect).abs() < 1e-12);
    }

    #[test]
    fn lse() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
