//! Limited-memory BFGS with a strong Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    /// Number of stored curvature pairs.
    pub history: usize,
    pub max_iter: usize,
    /// Stop when `‖∇f‖_∞` falls to this value.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iter: 2000,
            grad_tol: 1e-9,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    /// `1 / sᵀy`, positive.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LbfgsState {
    pub pairs: VecDeque<CurvaturePair>,
    pub iteration: usize,
    /// Pairs rejected by the curvature test.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub status: LbfgsStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub value: f64,
    pub grad_inf: f64,
    /// Objective after each accepted step.
    pub values: Vec<f64>,
    pub state: LbfgsState,
}

/// Minimizes `oracle` starting at `x0`. Non-finite trial values inside the
/// line search shrink the step; a non-finite value at `x0` is an error.
pub fn lbfgs_minimize<F>(mut oracle: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<(Vec<f64>, LbfgsReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = oracle(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("L-BFGS initial point"));
    }
    if g.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "L-BFGS gradient",
            expected: x.len(),
            got: g.len(),
        });
    }
    let mut state = LbfgsState::default();
    let mut evaluations = 1;
    let mut values = Vec::new();
    let mut status = LbfgsStatus::MaxIterations;
    loop {
        if inf_norm(&g) <= cfg.grad_tol {
            status = LbfgsStatus::Converged;
            break;
        }
        if state.iteration >= cfg.max_iter {
            break;
        }
        let mut d = direction(&g, &state.pairs);
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) || !gd.is_finite() {
            state.pairs.clear();
            d = g.iter().map(|v| -v).collect();
            gd = -dot(&g, &g);
        }
        let alpha0 = if state.pairs.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let ls = line_search(&mut oracle, &x, f, gd, &d, alpha0, cfg)?;
        evaluations += ls.evaluations;
        let Some(step) = ls.accepted else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if state.pairs.len() == cfg.history {
                state.pairs.pop_front();
            }
            if cfg.history > 0 {
                state.pairs.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
            }
        } else {
            state.skipped += 1;
        }
        x = step.x;
        f = step.f;
        g = step.g;
        state.iteration += 1;
        values.push(f);
    }
    let report = LbfgsReport {
        status,
        iterations: state.iteration,
        evaluations,
        value: f,
        grad_inf: inf_norm(&g),
        values,
        state,
    };
    Ok((x, report))
}

/// Two-loop recursion for `-H g` with `H_0 = (sᵀy / yᵀy) I`.
fn direction(g: &[f64], pairs: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        axpy(-a, &p.y, &mut q);
        alphas.push(a);
    }
    if let Some(p) = pairs.back() {
        let gamma = 1.0 / (p.rho * dot(&p.y, &p.y));
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        axpy(a - b, &p.s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    /// Directional derivative `∇f(x)ᵀd`; NaN when the trial was non-finite.
    d: f64,
}

struct LineSearch {
    accepted: Option<Trial>,
    evaluations: usize,
}

/// Strong Wolfe search (bracketing then zoom with safeguarded cubic
/// interpolation). When the budget runs out, the lowest trial satisfying
/// sufficient decrease is accepted; if there is none the search fails.
fn line_search<F>(
    oracle: &mut F,
    x: &[f64],
    f0: f64,
    gd0: f64,
    dir: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Result<LineSearch>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evaluations = 0;
    let mut best: Option<Trial> = None;
    let armijo = |t: &Trial| t.f <= f0 + cfg.c1 * t.alpha * gd0 && t.f < f0;
    let curvature = |t: &Trial| t.d.abs() <= -cfg.c2 * gd0;

    let mut eval = |alpha: f64, evaluations: &mut usize| -> Result<Trial> {
        *evaluations += 1;
        let xt: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + alpha * di).collect();
        match oracle(&xt) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let d = dot(&g, dir);
                Ok(Trial { alpha, x: xt, f, g, d })
            }
            Ok(_) | Err(Error::NonFinite(_)) => Ok(Trial {
                alpha,
                x: xt,
                f: f64::INFINITY,
                g: Vec::new(),
                d: f64::NAN,
            }),
            Err(e) => Err(e),
        }
    };
    let keep_best = |t: &Trial, best: &mut Option<Trial>| {
        if armijo(t) && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial {
                alpha: t.alpha,
                x: t.x.clone(),
                f: t.f,
                g: t.g.clone(),
                d: t.d,
            });
        }
    };

    // (alpha, f, d) at the lower end of the current interval.
    let mut prev = (0.0, f0, gd0);
    let mut alpha = alpha0;
    let mut bracket: Option<((f64, f64, f64), (f64, f64, f64))> = None;
    let mut first = true;
    while evaluations < cfg.max_line_search {
        let t = eval(alpha, &mut evaluations)?;
        keep_best(&t, &mut best);
        if !armijo(&t) || (!first && t.f >= prev.1) {
            bracket = Some((prev, (t.alpha, t.f, t.d)));
            break;
        }
        if curvature(&t) {
            return Ok(LineSearch {
                accepted: Some(t),
                evaluations,
            });
        }
        if t.d >= 0.0 {
            bracket = Some(((t.alpha, t.f, t.d), prev));
            break;
        }
        prev = (t.alpha, t.f, t.d);
        alpha *= 2.0;
        first = false;
    }

    if let Some((mut lo, mut hi)) = bracket {
        while evaluations < cfg.max_line_search {
            let a = interpolate(lo, hi);
            let t = eval(a, &mut evaluations)?;
            keep_best(&t, &mut best);
            if !armijo(&t) || t.f >= lo.1 {
                hi = (t.alpha, t.f, t.d);
            } else {
                if curvature(&t) {
                    return Ok(LineSearch {
                        accepted: Some(t),
                        evaluations,
                    });
                }
                if t.d * (hi.0 - lo.0) >= 0.0 {
                    hi = lo;
                }
                lo = (t.alpha, t.f, t.d);
            }
            if (hi.0 - lo.0).abs() <= f64::EPSILON * lo.0.abs().max(hi.0.abs()) {
                break;
            }
        }
    }
    Ok(LineSearch {
        accepted: best,
        evaluations,
    })
}

/// Minimizer of the cubic through `(a, f_a, d_a)` and `(b, f_b, d_b)`,
/// clamped to the middle 80% of the interval; bisection if undefined.
fn interpolate(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
    let w = hi - lo;
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    let t1 = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = t1 * t1 - d0 * d1;
    let mut m = f64::NAN;
    if disc >= 0.0 {
        let t2 = (x1 - x0).signum() * disc.sqrt();
        m = x1 - (x1 - x0) * (d1 + t2 - t1) / (d1 - d0 + 2.0 * t2);
    }
    if !m.is_finite() {
        return 0.5 * (lo + hi);
    }
    m.clamp(lo + 0.1 * w, hi - 0.1 * w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * dot(x, x), x.to_vec()))
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn quadratic_in_two_iterations() {
        let (x, r) = lbfgs_minimize(quadratic, vec![3.0, -4.0], &LbfgsConfig::default()).unwrap();
        assert!(norm(&x) <= 1e-10, "{x:?}");
        assert!(r.iterations <= 2);
        assert_eq!(r.status, LbfgsStatus::Converged);
    }

    #[test]
    fn zero_gradient_returns_immediately() {
        let (x, r) = lbfgs_minimize(quadratic, vec![0.0, 0.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(x, [0.0, 0.0]);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn rosenbrock_within_budget() {
        let cfg = LbfgsConfig {
            max_iter: 100,
            ..Default::default()
        };
        let (x, r) = lbfgs_minimize(rosenbrock, vec![-1.2, 1.0], &cfg).unwrap();
        assert!(rosenbrock(&x).unwrap().0 < 1e-8, "{r:?}");
        assert!(r.iterations <= 100);
        assert!(r.values.windows(2).all(|w| w[1] < w[0]));
        for p in &r.state.pairs {
            let sy = dot(&p.s, &p.y);
            assert!(sy > 1e-12 * norm(&p.s) * norm(&p.y));
        }
    }

    #[test]
    fn non_finite_region_is_avoided() {
        // f = x² for x < 1, undefined beyond; start near the wall.
        let oracle = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] > 1.0 {
                Err(Error::NonFinite("test"))
            } else {
                Ok(((x[0] - 0.9).powi(2), vec![2.0 * (x[0] - 0.9)]))
            }
        };
        let (x, _) = lbfgs_minimize(oracle, vec![-5.0], &LbfgsConfig::default()).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn linear_objective_reports_failure_without_panicking() {
        let oracle = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0].abs() > 1e6 {
                return Err(Error::NonFinite("test"));
            }
            Ok((x[0], vec![1.0]))
        };
        let cfg = LbfgsConfig {
            max_iter: 50,
            ..Default::default()
        };
        let (x, r) = lbfgs_minimize(oracle, vec![0.0], &cfg).unwrap();
        assert!(x[0] < 0.0);
        assert_ne!(r.status, LbfgsStatus::Converged);
    }
}
