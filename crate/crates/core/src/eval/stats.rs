use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p value of the t statistic with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

/// Sample Pearson correlation and its two-sided p value.
pub fn pearson(v1: &[f64], v2: &[f64]) -> Result<Correlation> {
    let n = v1.len();
    if n != v2.len() {
        return Err(Error::InvalidInput(format!(
            "vectors of length {} and {}",
            n,
            v2.len()
        )));
    }
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 3 samples, got {n}"
        )));
    }
    let m1 = v1.iter().sum::<f64>() / n as f64;
    let m2 = v2.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in v1.iter().zip(v2) {
        let (x, y) = (a - m1, b - m2);
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::UndefinedCorrelation(
            "a sample has zero variance".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        p: p_value(r, n),
        n,
    })
}

/// Two-sided p for correlation `r` over `n` samples.
pub fn p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    // P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2) and df/(df+t²) = 1 - r²
    beta_reg(0.5 * df, 0.5, 1.0 - r2)
}
