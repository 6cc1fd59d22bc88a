//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks independent of the thread count;
//! partial sums are combined in chunk order so results are bit-identical
//! from run to run.

use rayon::prelude::*;

pub const CHUNK: usize = 2048;

/// Sum `dim` accumulators over `0..n`. `f` adds the contribution of one
/// index range into its buffer.
pub fn chunked_sum<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; dim];
            let lo = c * CHUNK;
            f(lo..(lo + CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; dim];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Neumaier-compensated sum, used where absolute slack matters.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Deterministic parallel compensated sum of `f(i)` over `0..n`.
pub fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            compensated_sum((lo..(lo + CHUNK).min(n)).map(&f))
        })
        .collect();
    compensated_sum(partials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_serial() {
        let n = 10_000;
        let s = chunked_sum(n, 2, |r, acc| {
            for i in r {
                acc[0] += i as f64;
                acc[1] += 1.0;
            }
        });
        assert_eq!(s[0], (n * (n - 1) / 2) as f64);
        assert_eq!(s[1], n as f64);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn det_sum_is_repeatable() {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let a = det_sum(50_000, f);
        let b = det_sum(50_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
