//! Empirical PINN loss, its Lipschitz-regularized (LIPR) extension and the
//! regularization weight schedules.
//!
//! ```text
//! PINN = λ_r/m_r Σ_i |𝓛h(x_i) - f(x_i)|² + Σ_j λ_bj/m_bj Σ_i |h(x_i) - g_j(x_i)|²
//! LIPR = PINN + λ_r^R max_i ‖∇𝓛h(x_i)‖_∞² + Σ_j λ_bj^R max_i ‖∇_τ h(x_i)‖_∞²
//! ```
//!
//! `∇_τ` is the gradient along the free (tangential) axes of boundary group
//! `j`; finite groups such as interval endpoints carry no such term. The
//! subgradient of each max flows to the first maximizing point.

use serde::{Deserialize, Serialize};

use crate::jets::{self, Jet3, Point, MAX_DIM};
use crate::network::Network;
use crate::pde::{OperatorKind, OperatorSpec, PdeProblem};
use crate::sampling::{DistributionConstants, TrainingSet};
use crate::{Error, Result};

/// Data weights `λ` and regularization weights `λ^R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_b: Vec<f64>,
    pub reg_r: f64,
    pub reg_b: Vec<f64>,
}

impl LossWeights {
    /// Plain PINN weights (`λ^R = 0`).
    pub fn pinn(lambda_r: f64, lambda_b: Vec<f64>) -> Self {
        let n = lambda_b.len();
        LossWeights {
            lambda_r,
            lambda_b,
            reg_r: 0.0,
            reg_b: vec![0.0; n],
        }
    }

    pub fn validate(&self, groups: usize) -> Result<()> {
        if self.lambda_b.len() != groups || self.reg_b.len() != groups {
            return Err(Error::DimensionMismatch {
                what: "boundary weights",
                expected: groups,
                got: self.lambda_b.len().min(self.reg_b.len()),
            });
        }
        let all = [self.lambda_r, self.reg_r]
            .into_iter()
            .chain(self.lambda_b.iter().copied())
            .chain(self.reg_b.iter().copied());
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    fn regularized(&self) -> bool {
        self.reg_r > 0.0 || self.reg_b.iter().any(|&w| w > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `λ_r^R = m_r^{-3/2}`.
    PoissonLipr,
    /// `λ_r^R = 2/m_r`, `λ_bj^R = 1/(m_bj √m_r)`.
    HeatLipr,
    /// The `λ̂` weights of the generalization bound.
    Theory,
    /// The base weights unchanged.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub weights: LossWeights,
    /// Bound constant `C_m`, reported by the theory schedule.
    pub c_m: Option<f64>,
}

/// Regularization weights for the given sample counts. Data weights are
/// taken from `base` unchanged.
pub fn holder_schedule(
    kind: ScheduleKind,
    m_r: usize,
    m_b: &[usize],
    constants: Option<&DistributionConstants>,
    base: &LossWeights,
) -> Result<Schedule> {
    if m_r == 0 {
        return Err(Error::InvalidArgument("schedules need m_r >= 1".into()));
    }
    if base.lambda_b.len() != m_b.len() {
        return Err(Error::DimensionMismatch {
            what: "boundary weights for schedule",
            expected: m_b.len(),
            got: base.lambda_b.len(),
        });
    }
    let mut w = base.clone();
    w.reg_b = vec![0.0; m_b.len()];
    let mr = m_r as f64;
    let mut c_m = None;
    match kind {
        ScheduleKind::Constant => w.reg_b = base.reg_b.clone(),
        ScheduleKind::PoissonLipr => w.reg_r = mr.powf(-1.5),
        ScheduleKind::HeatLipr => {
            w.reg_r = 2.0 / mr;
            for (r, &mb) in w.reg_b.iter_mut().zip(m_b) {
                if mb == 0 {
                    return Err(Error::InvalidArgument("heat schedule needs m_b >= 1".into()));
                }
                *r = 1.0 / (mb as f64 * mr.sqrt());
            }
        }
        ScheduleKind::Theory => {
            let k = constants.ok_or_else(|| {
                Error::InvalidArgument("theory schedule needs distribution constants".into())
            })?;
            k.validate()?;
            let (d, a) = (k.d as f64, k.alpha);
            if k.d == 1 {
                let cm = 3.0 * k.kappa_r() * mr.sqrt();
                w.reg_r = base.lambda_r * k.c_r.powf(-2.0 * a) / k.kappa_r() * mr.powf(-a - 0.5);
                c_m = Some(cm);
            } else {
                if m_b.contains(&0) {
                    return Err(Error::InvalidArgument("theory schedule needs m_b >= 1".into()));
                }
                let sd = d.sqrt();
                let mut cm = k.kappa_r() * sd.powf(d) * mr.sqrt();
                for &mb in m_b {
                    cm = cm.max(k.kappa_b() * sd.powf(d - 1.0) * (mb as f64).sqrt());
                }
                cm *= 3.0;
                w.reg_r = 3.0 * base.lambda_r * sd.powf(2.0 * a) * k.c_r.powf(-2.0 * a / d)
                    * mr.powf(-a / d)
                    / cm;
                for ((r, &mb), &lb) in w.reg_b.iter_mut().zip(m_b).zip(&base.lambda_b) {
                    *r = 3.0 * lb * sd.powf(2.0 * a) * k.c_b.powf(-2.0 * a / (d - 1.0))
                        * (mb as f64).powf(-a / (d - 1.0))
                        / cm;
                }
                c_m = Some(cm);
            }
        }
    }
    Ok(Schedule { weights: w, c_m })
}

/// Training points with precomputed forcing and boundary data.
#[derive(Debug, Clone)]
pub struct LossData {
    op: OperatorSpec,
    dim: usize,
    residual: Vec<Point>,
    f: Vec<f64>,
    boundary: Vec<Vec<Point>>,
    g: Vec<Vec<f64>>,
    tangential: Vec<Vec<usize>>,
}

impl LossData {
    pub fn new(problem: &PdeProblem, set: &TrainingSet) -> Result<Self> {
        let dim = problem.input_dim();
        if set.dim != dim {
            return Err(Error::DimensionMismatch {
                what: "training set dimension",
                expected: dim,
                got: set.dim,
            });
        }
        if set.boundary.len() != problem.groups().len() {
            return Err(Error::DimensionMismatch {
                what: "training set boundary groups",
                expected: problem.groups().len(),
                got: set.boundary.len(),
            });
        }
        let f = set
            .residual
            .iter()
            .map(|p| problem.f(&p[..dim]))
            .collect::<Result<Vec<_>>>()?;
        let g = set
            .boundary
            .iter()
            .enumerate()
            .map(|(j, pts)| pts.iter().map(|p| problem.g(j, &p[..dim])).collect())
            .collect::<Result<Vec<_>>>()?;
        let tangential = problem.groups().iter().map(|g| g.region.free_axes()).collect();
        Ok(LossData {
            op: problem.op().clone(),
            dim,
            residual: set.residual.clone(),
            f,
            boundary: set.boundary.clone(),
            g,
            tangential,
        })
    }

    pub fn m_r(&self) -> usize {
        self.residual.len()
    }

    pub fn m_b(&self) -> Vec<usize> {
        self.boundary.iter().map(Vec::len).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// A loss value with its parts and, on request, the parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub residual_term: f64,
    pub boundary_terms: Vec<f64>,
    pub reg_r_term: f64,
    pub reg_b_terms: Vec<f64>,
    /// Index (within the evaluated batch) of the maximizing residual point.
    pub argmax_r: Option<usize>,
    pub grad: Option<Vec<f64>>,
}

impl LossEval {
    /// The unregularized part.
    pub fn pinn(&self) -> f64 {
        self.residual_term + self.boundary_terms.iter().sum::<f64>()
    }
}

/// First point maximizing `‖v‖_∞` over `(axis, value)` components, as
/// `(point, axis, signed component)`.
fn argmax_inf<I, C>(items: I) -> Option<(usize, usize, f64)>
where
    I: Iterator<Item = C>,
    C: Iterator<Item = (usize, f64)>,
{
    let mut best: Option<(f64, usize, usize, f64)> = None;
    for (i, comps) in items.enumerate() {
        for (k, v) in comps {
            if best.is_none_or(|b| v.abs() > b.0) {
                best = Some((v.abs(), i, k, v));
            }
        }
    }
    best.map(|(_, i, k, v)| (i, k, v))
}

/// Evaluates the loss on the residual points selected by `batch` (all when
/// `None`) and on every boundary point.
pub fn evaluate(
    net: &Network,
    data: &LossData,
    weights: &LossWeights,
    batch: Option<&[usize]>,
    want_grad: bool,
) -> Result<LossEval> {
    weights.validate(data.boundary.len())?;
    if net.arch().input_dim() != data.dim {
        return Err(Error::DimensionMismatch {
            what: "network input width for loss",
            expected: data.dim,
            got: net.arch().input_dim(),
        });
    }
    let dim = data.dim;
    let op = &data.op;
    let n = op.space_dim();
    let parabolic = op.kind() == OperatorKind::Parabolic;
    let mut grad = want_grad.then(|| vec![0.0; net.params().len()]);

    // Residual points.
    let idx: Vec<usize> = match batch {
        Some(b) => {
            if let Some(&bad) = b.iter().find(|&&i| i >= data.residual.len()) {
                return Err(Error::InvalidArgument(format!("batch index {bad} out of range")));
            }
            b.to_vec()
        }
        None => (0..data.residual.len()).collect(),
    };
    let pts: Vec<Point> = idx.iter().map(|&i| data.residual[i]).collect();
    let reg_r = weights.reg_r > 0.0;
    let order = if reg_r { 3 } else { 2 };
    let (jets_r, tape_r) = if want_grad {
        let t = jets::forward_batch_taped(net, &pts, order);
        (t.jets().to_vec(), Some(t))
    } else {
        (jets::forward_batch_order(net, &pts, order), None)
    };
    if jets_r.iter().any(|j| !j.is_finite()) {
        return Err(Error::NonFinite("network jet"));
    }
    let scale = if idx.is_empty() { 0.0 } else { weights.lambda_r / idx.len() as f64 };
    let mut residual_term = 0.0;
    let mut cots = Vec::with_capacity(if want_grad { idx.len() } else { 0 });
    for (jet, &i) in jets_r.iter().zip(&idx) {
        let r = op.residual(jet)? - data.f[i];
        residual_term += scale * r * r;
        if want_grad {
            cots.push(residual_cotangent(op, dim, 2.0 * scale * r));
        }
    }
    let mut reg_r_term = 0.0;
    let mut argmax_r = None;
    if reg_r {
        let grads = jets_r
            .iter()
            .map(|j| op.residual_gradient(j))
            .collect::<Result<Vec<_>>>()?;
        if let Some((i, k, v)) = argmax_inf(grads.iter().map(|g| g[..dim].iter().copied().enumerate())) {
            reg_r_term = weights.reg_r * v * v;
            argmax_r = Some(i);
            if want_grad {
                let c = 2.0 * weights.reg_r * v;
                let cot = &mut cots[i];
                for a in 0..n {
                    for b in 0..n {
                        cot.d3[a][b][k] += c * op.a(a, b);
                    }
                    cot.d2[a][k] += c * op.b(a);
                }
                cot.d1[k] += c * op.c();
                if parabolic {
                    cot.d2[n][k] -= c;
                }
            }
        }
    }
    if let (Some(g), Some(t)) = (grad.as_mut(), tape_r.as_ref()) {
        jets::accumulate_batch_gradient(t, &cots, g)?;
    }

    // Boundary groups, always in full, evaluated as one batch.
    let reg_group: Vec<bool> = (0..data.boundary.len())
        .map(|j| weights.reg_b[j] > 0.0 && !data.tangential[j].is_empty())
        .collect();
    let order_b = usize::from(reg_group.iter().any(|&r| r));
    let pts_b: Vec<Point> = data.boundary.iter().flatten().copied().collect();
    let (jets_b, tape_b) = if want_grad {
        let t = jets::forward_batch_taped(net, &pts_b, order_b);
        (t.jets().to_vec(), Some(t))
    } else {
        (jets::forward_batch_order(net, &pts_b, order_b), None)
    };
    if jets_b.iter().any(|j| !j.is_finite()) {
        return Err(Error::NonFinite("network jet"));
    }
    let mut cots_b = vec![Jet3::zero(dim); if want_grad { pts_b.len() } else { 0 }];
    let mut boundary_terms = Vec::with_capacity(data.boundary.len());
    let mut reg_b_terms = Vec::with_capacity(data.boundary.len());
    let mut offset = 0;
    for (j, pts) in data.boundary.iter().enumerate() {
        let jets_j = &jets_b[offset..offset + pts.len()];
        let scale = if pts.is_empty() { 0.0 } else { weights.lambda_b[j] / pts.len() as f64 };
        let mut term = 0.0;
        for (i, jet) in jets_j.iter().enumerate() {
            let r = jet.value - data.g[j][i];
            term += scale * r * r;
            if want_grad {
                cots_b[offset + i].value = 2.0 * scale * r;
            }
        }
        let mut reg_term = 0.0;
        if reg_group[j] {
            let tang = &data.tangential[j];
            if let Some((i, k, v)) = argmax_inf(jets_j.iter().map(|jet| tang.iter().map(|&k| (k, jet.d1[k])))) {
                reg_term = weights.reg_b[j] * v * v;
                if want_grad {
                    cots_b[offset + i].d1[k] += 2.0 * weights.reg_b[j] * v;
                }
            }
        }
        boundary_terms.push(term);
        reg_b_terms.push(reg_term);
        offset += pts.len();
    }
    if let (Some(g), Some(t)) = (grad.as_mut(), tape_b.as_ref()) {
        jets::accumulate_batch_gradient(t, &cots_b, g)?;
    }

    let value = residual_term
        + boundary_terms.iter().sum::<f64>()
        + reg_r_term
        + reg_b_terms.iter().sum::<f64>();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossEval {
        value,
        residual_term,
        boundary_terms,
        reg_r_term,
        reg_b_terms,
        argmax_r,
        grad,
    })
}

/// Cotangent of `c · 𝓛[h]` on the jet channels.
fn residual_cotangent(op: &OperatorSpec, dim: usize, c: f64) -> Jet3 {
    let n = op.space_dim();
    let mut cot = Jet3::zero(dim);
    for i in 0..n {
        for j in 0..n {
            cot.d2[i][j] = c * op.a(i, j);
        }
        cot.d1[i] = c * op.b(i);
    }
    cot.value = c * op.c();
    if op.kind() == OperatorKind::Parabolic {
        cot.d1[n] = -c;
    }
    debug_assert!(dim <= MAX_DIM);
    cot
}

/// Full-batch PINN loss with its parameter gradient.
pub fn pinn_loss(
    net: &Network,
    problem: &PdeProblem,
    set: &TrainingSet,
    weights: &LossWeights,
) -> Result<LossEval> {
    let w = LossWeights {
        reg_r: 0.0,
        reg_b: vec![0.0; weights.reg_b.len()],
        ..weights.clone()
    };
    evaluate(net, &LossData::new(problem, set)?, &w, None, true)
}

/// Full-batch LIPR loss with its parameter gradient.
pub fn lipr_loss(
    net: &Network,
    problem: &PdeProblem,
    set: &TrainingSet,
    weights: &LossWeights,
) -> Result<LossEval> {
    evaluate(net, &LossData::new(problem, set)?, weights, None, true)
}

/// Whether `weights` need third-order jets.
pub fn needs_third_order(weights: &LossWeights) -> bool {
    weights.regularized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, Wrapper};
    use crate::sampling::Generator;

    fn tanh_neuron() -> Network {
        Network::from_params(Architecture::feed_forward(vec![1, 1, 1]).unwrap(), vec![1.0, 0.0, 1.0, 0.0])
            .unwrap()
    }

    fn poisson_set(m: usize) -> (PdeProblem, TrainingSet) {
        let p = PdeProblem::poisson_tanh();
        let s = TrainingSet::generate(&p, Generator::Equidistant, m, &[2], 0).unwrap();
        (p, s)
    }

    #[test]
    fn zero_network_poisson_loss() {
        let (p, s) = poisson_set(11);
        let net = Network::zeros(Architecture::feed_forward(vec![1, 4, 1]).unwrap());
        let w = LossWeights::pinn(1.0, vec![1.0]);
        let e = pinn_loss(&net, &p, &s, &w).unwrap();
        let mean_f2 = s.residual.iter().map(|x| p.f(&x[..1]).unwrap().powi(2)).sum::<f64>() / 11.0;
        let t = 1f64.tanh();
        assert!((e.value - (mean_f2 + t * t)).abs() < 1e-15);
        assert!((t * t - 0.58002).abs() < 1e-5);
        let lipr = lipr_loss(&net, &p, &s, &LossWeights { reg_r: 0.3, ..w }).unwrap();
        assert_eq!(lipr.value, e.value);
    }

    #[test]
    fn exact_network_has_zero_loss() {
        let (p, s) = poisson_set(25);
        let e = pinn_loss(&tanh_neuron(), &p, &s, &LossWeights::pinn(1.0, vec![1.0])).unwrap();
        assert!(e.value < 1e-24);
    }

    #[test]
    fn residual_term_is_homogeneous() {
        let (p, s) = poisson_set(9);
        let net = Network::xavier(Architecture::feed_forward(vec![1, 5, 1]).unwrap(), 3);
        let a = pinn_loss(&net, &p, &s, &LossWeights::pinn(1.0, vec![1.0])).unwrap();
        let b = pinn_loss(&net, &p, &s, &LossWeights::pinn(2.0, vec![1.0])).unwrap();
        assert_eq!(b.residual_term, 2.0 * a.residual_term);
        assert_eq!(b.boundary_terms, a.boundary_terms);
    }

    #[test]
    fn single_point_regularizer() {
        let p = PdeProblem::poisson_tanh();
        let s = TrainingSet {
            dim: 1,
            residual: vec![[0.0; 3]],
            boundary: vec![vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]],
            seed: 0,
            generator: Generator::Equidistant,
        };
        let w = LossWeights {
            lambda_r: 1.0,
            lambda_b: vec![1.0],
            reg_r: 0.25,
            reg_b: vec![0.0],
        };
        let e = lipr_loss(&tanh_neuron(), &p, &s, &w).unwrap();
        assert_eq!(e.reg_r_term, 0.25 * 4.0);
        assert_eq!(e.argmax_r, Some(0));
    }

    #[test]
    fn endpoint_groups_have_no_regularizer() {
        let (p, s) = poisson_set(5);
        let net = Network::xavier(Architecture::feed_forward(vec![1, 5, 1]).unwrap(), 1);
        let w = LossWeights {
            lambda_r: 1.0,
            lambda_b: vec![1.0],
            reg_r: 0.0,
            reg_b: vec![10.0],
        };
        let e = lipr_loss(&net, &p, &s, &w).unwrap();
        assert_eq!(e.reg_b_terms, [0.0]);
    }

    #[test]
    fn schedule_examples() {
        let base1 = LossWeights::pinn(1.0, vec![1.0]);
        let s = holder_schedule(ScheduleKind::PoissonLipr, 100, &[2], None, &base1).unwrap();
        assert!((s.weights.reg_r - 1e-3).abs() < 1e-18);

        let base3 = LossWeights::pinn(1.0, vec![1.0; 3]);
        let s = holder_schedule(ScheduleKind::HeatLipr, 200, &[10, 10, 20], None, &base3).unwrap();
        assert!((s.weights.reg_r - 0.01).abs() < 1e-18);
        assert!((s.weights.reg_b[0] - 7.0711e-3).abs() < 1e-7);
        assert!((s.weights.reg_b[2] - 1.0 / (20.0 * 200f64.sqrt())).abs() < 1e-18);

        let k = DistributionConstants::new(0.5, 1.0, 0.5, 0.5, 1, 1.0).unwrap();
        let s = holder_schedule(ScheduleKind::Theory, 100, &[2], Some(&k), &base1).unwrap();
        assert!((s.c_m.unwrap() - 60.0).abs() < 1e-12);
        assert!((s.weights.reg_r - 2e-3).abs() < 1e-15);
        assert_eq!(s.weights.reg_b, [0.0]);
        assert!(holder_schedule(ScheduleKind::Theory, 100, &[2], None, &base1).is_err());
    }

    #[test]
    fn wrapped_problem_boundary_term_vanishes() {
        let p = PdeProblem::poisson_sin6pi();
        let s = TrainingSet::generate(&p, Generator::Equidistant, 20, &[2], 0).unwrap();
        let a = Architecture::new(vec![1, 6, 6, 1], true, Wrapper::DirichletZero).unwrap();
        let e = pinn_loss(&Network::xavier(a, 2), &p, &s, &LossWeights::pinn(1.0, vec![1.0])).unwrap();
        assert_eq!(e.boundary_terms, [0.0]);
    }
}
