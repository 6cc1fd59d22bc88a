//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The line search follows the bracketing/zoom scheme with safeguarded cubic
//! interpolation (Nocedal & Wright, Alg. 3.5/3.6). The driver minimises; use
//! [`maximize`] for objectives that should go up.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `max |g_i| <= grad_tol`.
    pub grad_tol: f64,
    /// Stop when one iteration improves the objective by less than
    /// `f_tol * max(1, |f|)`. Zero disables the test.
    pub f_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iterations: 300,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// The line search failed even after discarding the curvature memory.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective after every accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.termination != Termination::LineSearchFailed
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimiser of the cubic through `(x1, f1, g1)` and `(x2, f2, g2)`, clamped
/// to `bounds`.
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    if ![x1, f1, g1, x2, f2, g2].iter().all(|v| v.is_finite()) {
        return 0.5 * (lo + hi);
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct LineSearchOutcome {
    probe: Probe,
    evaluations: usize,
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    obj: &mut F,
    x: &[f64],
    d: &[f64],
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    t_init: f64,
    cfg: &LbfgsConfig,
) -> LineSearchOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let d_norm = inf_norm(d);
    let mut xt = vec![0.0; n];
    let mut evals = 0usize;
    let mut eval = |t: f64, evals: &mut usize| -> Probe {
        for i in 0..n {
            xt[i] = x[i] + t * d[i];
        }
        let mut g = vec![0.0; n];
        let mut f = obj(&xt, &mut g);
        if !f.is_finite() {
            f = f64::INFINITY;
        }
        *evals += 1;
        let gtd = if f.is_finite() { dot(&g, d) } else { f64::NAN };
        Probe { t, f, g, gtd }
    };

    let start = Probe {
        t: 0.0,
        f: f0,
        g: g0.to_vec(),
        gtd: gtd0,
    };
    let mut prev = Probe {
        t: 0.0,
        f: f0,
        g: g0.to_vec(),
        gtd: gtd0,
    };
    let mut cur = eval(t_init, &mut evals);
    let mut iter = 0;
    let mut bracket: Vec<Probe>;
    let mut done = false;
    loop {
        if cur.f > f0 + cfg.c1 * cur.t * gtd0 || (iter > 1 && cur.f >= prev.f) || !cur.f.is_finite()
        {
            bracket = vec![prev, cur];
            break;
        }
        if cur.gtd.abs() <= -cfg.c2 * gtd0 {
            bracket = vec![cur];
            done = true;
            break;
        }
        if cur.gtd >= 0.0 {
            bracket = vec![prev, cur];
            break;
        }
        if iter + 1 >= cfg.max_line_search {
            bracket = vec![start, cur];
            break;
        }
        let min_step = cur.t + 0.01 * (cur.t - prev.t);
        let max_step = cur.t * 10.0;
        let t_next = cubic_interpolate(
            prev.t,
            prev.f,
            prev.gtd,
            cur.t,
            cur.f,
            cur.gtd,
            Some((min_step, max_step)),
        );
        prev = cur;
        cur = eval(t_next, &mut evals);
        iter += 1;
    }

    if done {
        let probe = bracket.pop().expect("bracket holds the accepted point");
        return LineSearchOutcome {
            probe,
            evaluations: evals,
        };
    }

    let mut insufficient = false;
    let (mut low, mut high) = if bracket[0].f <= bracket[1].f {
        (0, 1)
    } else {
        (1, 0)
    };
    while !done && iter < cfg.max_line_search {
        let (b0, b1) = (bracket[0].t, bracket[1].t);
        if (b1 - b0).abs() * d_norm < 1e-14 {
            break;
        }
        let mut t = cubic_interpolate(
            b0,
            bracket[0].f,
            bracket[0].gtd,
            b1,
            bracket[1].f,
            bracket[1].gtd,
            None,
        );
        let (bmin, bmax) = (b0.min(b1), b0.max(b1));
        let eps = 0.1 * (bmax - bmin);
        if (bmax - t).min(t - bmin) < eps {
            if insufficient || t >= bmax || t <= bmin {
                t = if (t - bmax).abs() < (t - bmin).abs() {
                    bmax - eps
                } else {
                    bmin + eps
                };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let p = eval(t, &mut evals);
        iter += 1;
        if p.f > f0 + cfg.c1 * t * gtd0 || p.f >= bracket[low].f {
            bracket[high] = p;
            if bracket[0].f <= bracket[1].f {
                low = 0;
                high = 1;
            } else {
                low = 1;
                high = 0;
            }
        } else {
            if p.gtd.abs() <= -cfg.c2 * gtd0 {
                done = true;
            } else if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket.swap(high, low);
            }
            bracket[low] = p;
        }
    }
    let probe = bracket.swap_remove(low);
    LineSearchOutcome {
        probe,
        evaluations: evals,
    }
}

/// Minimise `obj`, which writes the gradient into its second argument and
/// returns the value.
pub fn minimize<F>(mut obj: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj(&x, &mut g);
    let mut evaluations = 1;
    let mut trace = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut iterations = 0;

    if n == 0 || inf_norm(&g) <= cfg.grad_tol {
        return LbfgsResult {
            x,
            f,
            grad: g,
            iterations,
            evaluations,
            termination: Termination::GradientTolerance,
            trace,
        };
    }
    if !f.is_finite() {
        return LbfgsResult {
            x,
            f,
            grad: g,
            iterations,
            evaluations,
            termination: Termination::LineSearchFailed,
            trace,
        };
    }

    let termination = loop {
        if iterations >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &d);
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= alpha[i] * yj;
            }
        }
        if m > 0 {
            let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..m {
            let beta = rho[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alpha[i] - beta) * sj;
            }
        }
        let mut gtd = dot(&g, &d);
        if !(gtd < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
        }

        let t_init = if s_hist.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut ls = strong_wolfe(&mut obj, &x, &d, f, &g, gtd, t_init, cfg);
        evaluations += ls.evaluations;
        let improved = ls.probe.t > 0.0 && ls.probe.f < f;
        if !improved {
            if s_hist.is_empty() {
                break Termination::LineSearchFailed;
            }
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            let d_sd: Vec<f64> = g.iter().map(|v| -v).collect();
            let gtd_sd = dot(&g, &d_sd);
            let t0 = (1.0 / inf_norm(&g)).min(1.0);
            ls = strong_wolfe(&mut obj, &x, &d_sd, f, &g, gtd_sd, t0, cfg);
            evaluations += ls.evaluations;
            if !(ls.probe.t > 0.0 && ls.probe.f < f) {
                break Termination::LineSearchFailed;
            }
            d = d_sd;
        }
        let t = ls.probe.t;
        let s: Vec<f64> = d.iter().map(|v| t * v).collect();
        let y: Vec<f64> = ls.probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            rho.push(1.0 / sy);
            s_hist.push(s.clone());
            y_hist.push(y);
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let f_prev = f;
        f = ls.probe.f;
        g = ls.probe.g;
        iterations += 1;
        trace.push(f);
        if inf_norm(&g) <= cfg.grad_tol {
            break Termination::GradientTolerance;
        }
        if cfg.f_tol > 0.0 && f_prev - f <= cfg.f_tol * f.abs().max(1.0) {
            break Termination::FunctionTolerance;
        }
    };
    LbfgsResult {
        x,
        f,
        grad: g,
        iterations,
        evaluations,
        termination,
        trace,
    }
}

/// Maximise `obj`; the returned `f`, `grad` and `trace` are in the
/// objective's own sign.
pub fn maximize<F>(mut obj: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut r = minimize(
        |x, g| {
            let v = obj(x, g);
            g.iter_mut().for_each(|gi| *gi = -*gi);
            -v
        },
        x0,
        cfg,
    );
    r.f = -r.f;
    r.grad.iter_mut().for_each(|v| *v = -*v);
    r.trace.iter_mut().for_each(|v| *v = -*v);
    r
}
