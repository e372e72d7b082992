//! Error norms, convergence-rate fits, Hölder estimates and the numerical
//! checks of the covering-based loss bound and the sampling probability.
//!
//! Every integral is a composite trapezoid rule on an equidistant tensor
//! grid, so reported numbers are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::jets::{self, Point, MAX_DIM};
use crate::loss::LossWeights;
use crate::network::Network;
use crate::pde::{Axis, OperatorKind, PdeProblem, Region};
use crate::sampling::{self, DistributionConstants, TrainingSet};
use crate::{Error, Result};

/// Equidistant tensor grid over an axis-aligned box, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    /// `(lo, hi, count)` per input axis, time last.
    pub axes: Vec<(f64, f64, usize)>,
}

impl EvalGrid {
    /// Grid spanning the whole domain of `problem` with `counts[k]` points
    /// on axis `k`.
    pub fn over(problem: &PdeProblem, counts: &[usize]) -> Result<Self> {
        let mut bounds = problem.space().to_vec();
        if let Some(t) = problem.t_end() {
            bounds.push((0.0, t));
        }
        if counts.len() != bounds.len() {
            return Err(Error::DimensionMismatch {
                what: "evaluation grid axes",
                expected: bounds.len(),
                got: counts.len(),
            });
        }
        Ok(EvalGrid {
            axes: bounds.iter().zip(counts).map(|(&(lo, hi), &n)| (lo, hi, n)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.2).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, problem: &PdeProblem) -> Result<()> {
        let dim = problem.input_dim();
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                what: "evaluation grid axes",
                expected: dim,
                got: self.dim(),
            });
        }
        let Region::Box(domain) = problem.interior() else {
            unreachable!("interiors are boxes")
        };
        for (k, (&(lo, hi, n), ax)) in self.axes.iter().zip(domain).enumerate() {
            let Axis::Interval(a, b) = *ax else {
                unreachable!("interior axes are intervals")
            };
            if n < 2 {
                return Err(Error::InvalidArgument(format!("grid axis {k} needs at least 2 points")));
            }
            if !(lo < hi) || lo < a || hi > b {
                return Err(Error::InvalidArgument(format!(
                    "grid axis {k} spans [{lo}, {hi}], outside the domain [{a}, {b}]"
                )));
            }
        }
        Ok(())
    }

    /// Grid points (last axis fastest) and trapezoid weights summing to the
    /// box volume.
    pub fn quadrature(&self) -> Result<(Vec<Point>, Vec<f64>)> {
        let mut pts = vec![[0.0; MAX_DIM]];
        let mut wts = vec![1.0];
        for (k, &(lo, hi, n)) in self.axes.iter().enumerate() {
            let xs = sampling::equidistant(lo, hi, n)?;
            let ws = trapezoid_weights(lo, hi, n);
            let mut np = Vec::with_capacity(pts.len() * n);
            let mut nw = Vec::with_capacity(pts.len() * n);
            for (p, w) in pts.iter().zip(&wts) {
                for (x, v) in xs.iter().zip(&ws) {
                    let mut q = *p;
                    q[k] = *x;
                    np.push(q);
                    nw.push(w * v);
                }
            }
            pts = np;
            wts = nw;
        }
        Ok((pts, wts))
    }
}

/// Composite trapezoid weights for `n` equidistant nodes on `[lo, hi]`.
pub fn trapezoid_weights(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![hi - lo; n];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
        .collect()
}

/// Probe points of a region with trapezoid weights normalized to sum 1
/// (the uniform probability measure). Finite regions get equal weights.
fn region_quadrature(region: &Region, per_axis: usize) -> Result<(Vec<Point>, Vec<f64>)> {
    let pts = sampling::probe_grid(region, per_axis)?;
    let wts = match region {
        Region::Points(_) => vec![1.0 / pts.len() as f64; pts.len()],
        Region::Box(axes) => {
            let mut wts = vec![1.0];
            for k in region.free_axes() {
                let Axis::Interval(lo, hi) = axes[k] else { unreachable!("free axis") };
                let ws = trapezoid_weights(lo, hi, per_axis);
                wts = wts
                    .iter()
                    .flat_map(|w| ws.iter().map(move |v| w * v / (hi - lo)))
                    .collect();
            }
            wts
        }
    };
    Ok((pts, wts))
}

/// Predictive errors of a network against the exact solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `‖h − u*‖` in `L²` of the whole (space-time) domain.
    pub l2: f64,
    /// `H¹` error with the full gradient, time included.
    pub h1: f64,
    /// `L²(0,T;L²)`, parabolic problems only (equal to `l2`).
    pub l2_l2: Option<f64>,
    /// `L²(0,T;H¹)` with the spatial gradient only.
    pub l2_h1: Option<f64>,
    pub grid: Vec<usize>,
    /// Whether every value is divided by the matching norm of `u*`.
    pub relative: bool,
}

/// Trapezoid `L²`/`H¹` errors on `grid`. With `relative` each error is
/// divided by the same norm of the exact solution.
pub fn discrete_error(
    network: &Network,
    problem: &PdeProblem,
    grid: &EvalGrid,
    relative: bool,
) -> Result<ErrorReport> {
    grid.validate(problem)?;
    if network.arch().input_dim() != problem.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "network input width for error",
            expected: problem.input_dim(),
            got: network.arch().input_dim(),
        });
    }
    let (pts, wts) = grid.quadrature()?;
    let dim = grid.dim();
    let n_space = problem.op().space_dim();
    let parabolic = problem.op().kind() == OperatorKind::Parabolic;
    let jets_h = jets::forward_batch_order(network, &pts, 1);

    // [value², time-gradient², space-gradient²] for error and exact solution.
    let mut err = [0.0; 3];
    let mut ref_ = [0.0; 3];
    for ((p, w), jh) in pts.iter().zip(&wts).zip(&jets_h) {
        let ju = problem.exact_jet(&p[..dim])?;
        let e = jh.value - ju.value;
        err[0] += w * e * e;
        ref_[0] += w * ju.value * ju.value;
        for k in 0..dim {
            let ek = jh.d1[k] - ju.d1[k];
            let slot = if k < n_space { 2 } else { 1 };
            err[slot] += w * ek * ek;
            ref_[slot] += w * ju.d1[k] * ju.d1[k];
        }
    }
    if !err.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("error integrand"));
    }
    let norms = |s: [f64; 3]| {
        let l2 = s[0].sqrt();
        let h1 = (s[0] + s[1] + s[2]).sqrt();
        let l2_h1 = (s[0] + s[2]).sqrt();
        (l2, h1, l2_h1)
    };
    let (mut l2, mut h1, mut l2_h1) = norms(err);
    if relative {
        let (r2, rh, rb) = norms(ref_);
        l2 /= r2;
        h1 /= rh;
        l2_h1 /= rb;
    }
    Ok(ErrorReport {
        l2,
        h1,
        l2_l2: parabolic.then_some(l2),
        l2_h1: parabolic.then_some(l2_h1),
        grid: grid.axes.iter().map(|a| a.2).collect(),
        relative,
    })
}

/// Least-squares line through `(log m, log e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("rate fit needs at least two pairs".into()));
    }
    if let Some(&(m, e)) = pairs.iter().find(|&&(m, e)| !(m > 0.0 && e > 0.0) || !m.is_finite() || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs positive finite pairs, got ({m}, {e})"
        )));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("rate fit needs two distinct sample counts".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        residual: (ss / n).sqrt(),
    })
}

/// Largest difference quotient `|u(x) − u(y)| / ‖x − y‖^α` over all pairs of
/// samples. In one dimension with `α = 1` adjacent pairs of the sorted
/// samples already attain the maximum.
pub fn estimate_holder(points: &[Point], dim: usize, values: &[f64], alpha: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("Hölder estimate of an empty grid".into()));
    }
    if points.len() != values.len() {
        return Err(Error::DimensionMismatch {
            what: "Hölder samples",
            expected: points.len(),
            got: values.len(),
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("Hölder exponent {alpha} outside (0, 1]")));
    }
    let dist = |a: &Point, b: &Point| (0..dim).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
    let mut best = 0.0f64;
    if dim == 1 && alpha == 1.0 {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
        for w in idx.windows(2) {
            let d = dist(&points[w[0]], &points[w[1]]);
            if d > 0.0 {
                best = best.max((values[w[0]] - values[w[1]]).abs() / d);
            }
        }
        return Ok(best);
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(&points[i], &points[j]);
            if d > 0.0 {
                best = best.max((values[i] - values[j]).abs() / d.powf(alpha));
            }
        }
    }
    Ok(best)
}

/// Lipschitz estimate `max ‖∇u‖₂` from gradient samples.
pub fn max_gradient_norm(gradients: &[[f64; MAX_DIM]], dim: usize) -> Result<f64> {
    if gradients.is_empty() {
        return Err(Error::InvalidArgument("Lipschitz estimate of an empty grid".into()));
    }
    Ok(gradients
        .iter()
        .map(|g| g[..dim].iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// Both sides of the covering bound on the expected PINN loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "C_m")]
    pub c_m: f64,
    /// Effective regularization weights `3λ ε^{2α} / C_m`.
    pub lambda_hat_r: f64,
    pub lambda_hat_b: f64,
    pub eps_r: f64,
    pub eps_b: f64,
    pub holder_residual: f64,
    pub holder_boundary: f64,
    pub holder_f: f64,
    pub holder_g: f64,
    /// Empirical PINN loss on the training points.
    pub empirical: f64,
    /// Quadrature estimate of the expected PINN loss.
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// Data part `3λ_r ε_r^{2α}[f]² + 3λ_b ε_b^{2α}[g]²`.
    pub c_prime: f64,
}

/// Checks `E[loss] ≤ C_m·(empirical + Lipschitz terms) + data terms` with
/// covering radii measured on the same probe grids (`per_axis` probes per
/// free axis) that drive the quadrature.
///
/// The boundary is treated as one set carrying the uniform measure, so all
/// boundary weights must agree. For `α = 1` the Hölder constants are grid
/// maxima of gradient norms (tangential on the boundary); otherwise they are
/// pairwise difference quotients over the probes. Both are lower estimates
/// of the true constants.
pub fn check_lemma_bound(
    network: &Network,
    problem: &PdeProblem,
    set: &TrainingSet,
    weights: &LossWeights,
    alpha: f64,
    constants: &DistributionConstants,
    per_axis: usize,
) -> Result<BoundReport> {
    let dim = problem.input_dim();
    let groups = problem.groups();
    weights.validate(groups.len())?;
    constants.validate_ranges()?;
    if set.dim != dim || set.boundary.len() != groups.len() {
        return Err(Error::InvalidArgument("training set does not match the problem".into()));
    }
    if set.residual.is_empty() || set.boundary.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("bound check needs points in every set".into()));
    }
    let lambda_b = weights.lambda_b.first().copied().unwrap_or(0.0);
    if weights.lambda_b.iter().any(|&l| l != lambda_b) {
        return Err(Error::InvalidArgument(
            "bound check needs one boundary weight shared by all groups".into(),
        ));
    }
    let lambda_r = weights.lambda_r;
    let op = problem.op();

    // Empirical loss with the boundary as one pooled set.
    let jr = jets::forward_batch_order(network, &set.residual, 2);
    let mut res_sum = 0.0;
    for (p, j) in set.residual.iter().zip(&jr) {
        res_sum += (op.residual(j)? - problem.f(&p[..dim])?).powi(2);
    }
    let m_r = set.residual.len();
    let m_b: usize = set.boundary.iter().map(Vec::len).sum();
    let mut bnd_sum = 0.0;
    for (g, pts) in set.boundary.iter().enumerate() {
        for (p, j) in pts.iter().zip(jets::forward_batch_order(network, pts, 0)) {
            bnd_sum += (j.value - problem.g(g, &p[..dim])?).powi(2);
        }
    }
    let empirical = lambda_r * res_sum / m_r as f64 + lambda_b * bnd_sum / m_b as f64;

    // Interior: quadrature, covering radius, Lipschitz/Hölder constants.
    let (qr, wr) = region_quadrature(problem.interior(), per_axis)?;
    let eps_r = sampling::covering_radius(&set.residual, problem.interior(), per_axis)?;
    let jq = jets::forward_batch_order(network, &qr, 3);
    let mut lhs_r = 0.0;
    let mut lh_vals = Vec::with_capacity(qr.len());
    let mut f_vals = Vec::with_capacity(qr.len());
    let mut lh_grads = Vec::with_capacity(qr.len());
    let mut f_grads = Vec::with_capacity(qr.len());
    for ((p, w), j) in qr.iter().zip(&wr).zip(&jq) {
        let lh = op.residual(j)?;
        let f = problem.f(&p[..dim])?;
        lhs_r += w * (lh - f).powi(2);
        lh_vals.push(lh);
        f_vals.push(f);
        if alpha == 1.0 {
            lh_grads.push(op.residual_gradient(j)?);
            f_grads.push(problem.f_gradient(&p[..dim])?);
        }
    }
    let (holder_residual, holder_f) = if alpha == 1.0 {
        (max_gradient_norm(&lh_grads, dim)?, max_gradient_norm(&f_grads, dim)?)
    } else {
        (
            estimate_holder(&qr, dim, &lh_vals, alpha)?,
            estimate_holder(&qr, dim, &f_vals, alpha)?,
        )
    };

    // Boundary: pooled uniform measure over the groups.
    let total: f64 = groups.iter().map(|g| g.region.measure()).sum();
    let mut lhs_b = 0.0;
    let mut eps_b = 0.0f64;
    let mut holder_boundary = 0.0f64;
    let mut holder_g = 0.0f64;
    let all_b: Vec<Point> = set.boundary.concat();
    for (gi, group) in groups.iter().enumerate() {
        let (qb, wb) = region_quadrature(&group.region, per_axis)?;
        let share = group.region.measure() / total;
        let hb = jets::forward_batch_order(network, &qb, 1);
        let mut h_vals = Vec::with_capacity(qb.len());
        let mut g_vals = Vec::with_capacity(qb.len());
        let mut h_tan = Vec::with_capacity(qb.len());
        let mut g_tan = Vec::with_capacity(qb.len());
        let free = group.region.free_axes();
        for ((p, w), j) in qb.iter().zip(&wb).zip(&hb) {
            let g = problem.g(gi, &p[..dim])?;
            lhs_b += share * w * (j.value - g).powi(2);
            h_vals.push(j.value);
            g_vals.push(g);
            let ju = problem.exact_jet(&p[..dim])?;
            let mut th = [0.0; MAX_DIM];
            let mut tg = [0.0; MAX_DIM];
            for &k in &free {
                th[k] = j.d1[k];
                tg[k] = ju.d1[k];
            }
            h_tan.push(th);
            g_tan.push(tg);
        }
        // Distance from each probe to the nearest pooled boundary sample.
        for q in &qb {
            let d = all_b
                .iter()
                .map(|p| (0..dim).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            eps_b = eps_b.max(d.sqrt());
        }
        let (hh, hg) = if matches!(group.region, Region::Points(_)) || alpha != 1.0 {
            (
                estimate_holder(&qb, dim, &h_vals, alpha)?,
                estimate_holder(&qb, dim, &g_vals, alpha)?,
            )
        } else {
            (max_gradient_norm(&h_tan, dim)?, max_gradient_norm(&g_tan, dim)?)
        };
        holder_boundary = holder_boundary.max(hh);
        holder_g = holder_g.max(hg);
    }

    let d = dim as i32;
    let c_m = 3.0
        * (constants.big_c_r * m_r as f64 * eps_r.powi(d))
            .max(constants.big_c_b * m_b as f64 * eps_b.powi(d - 1));
    let er = eps_r.powf(2.0 * alpha);
    let eb = eps_b.powf(2.0 * alpha);
    let lip_terms = 3.0 * lambda_r * er * holder_residual.powi(2) + 3.0 * lambda_b * eb * holder_boundary.powi(2);
    let c_prime = 3.0 * lambda_r * er * holder_f.powi(2) + 3.0 * lambda_b * eb * holder_g.powi(2);
    let lhs = lambda_r * lhs_r + lambda_b * lhs_b;
    let rhs = c_m * empirical + lip_terms + c_prime;
    let report = BoundReport {
        c_m,
        lambda_hat_r: if c_m > 0.0 { 3.0 * lambda_r * er / c_m } else { 0.0 },
        lambda_hat_b: if c_m > 0.0 { 3.0 * lambda_b * eb / c_m } else { 0.0 },
        eps_r,
        eps_b,
        holder_residual,
        holder_boundary,
        holder_f,
        holder_g,
        empirical,
        lhs,
        rhs,
        slack: rhs - lhs,
        c_prime,
    };
    if ![report.lhs, report.rhs, report.c_m].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("bound report"));
    }
    Ok(report)
}

/// Outcome of repeated iid sampling against the covering threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub n: usize,
    pub trials: usize,
    /// Covering radius `√d · c^{-1/s} · n^{-1/(2s)}` that must be met.
    pub threshold: f64,
    /// `1 − √n (1 − 1/√n)^n`.
    pub bound: f64,
    /// Fraction of trials meeting the threshold; absent when `trials = 0`.
    pub empirical: Option<f64>,
}

/// Probability lower bound for `n` iid samples to cover at the threshold.
pub fn sampling_bound(n: usize) -> f64 {
    let rn = (n as f64).sqrt();
    1.0 - rn * (1.0 - 1.0 / rn).powi(n as i32)
}

/// Draws `trials` independent sets of `n` uniform points on `region` (trial
/// `t` uses stream `t` of the seeded generator) and counts how often the
/// covering radius, measured with `probes` per free axis, meets the
/// threshold. `c` is the partition mass constant of the measure.
pub fn sampling_probability_experiment(
    n: usize,
    trials: usize,
    region: &Region,
    c: f64,
    seed: u64,
    probes: usize,
) -> Result<SamplingReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("sampling experiment needs n >= 2".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("partition constant {c} must be positive")));
    }
    let s = region.free_axes().len();
    if s == 0 {
        return Err(Error::InvalidArgument("sampling experiment needs a continuous region".into()));
    }
    let (d, s) = (region.dim() as f64, s as f64);
    let threshold = d.sqrt() * c.powf(-1.0 / s) * (n as f64).powf(-1.0 / (2.0 * s));
    let empirical = if trials == 0 {
        None
    } else {
        let mut hits = 0usize;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let pts = sampling::iid_uniform_with(region, n, &mut rng)?;
            if sampling::covering_radius(&pts, region, probes)? <= threshold {
                hits += 1;
            }
        }
        Some(hits as f64 / trials as f64)
    };
    Ok(SamplingReport {
        n,
        trials,
        threshold,
        bound: sampling_bound(n),
        empirical,
    })
}
