//! Run configuration read from a TOML document.
//!
//! Sections: `[problem]`, `[network]`, `[train]`, `[loss]`, `[sweep]` and
//! `[verify]`, plus the top-level keys `seed` and `out`. Unknown keys are
//! rejected so that typos fail fast.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pinn_core::loss::{self, LossWeights, ScheduleKind};
use pinn_core::network::{Architecture, Wrapper};
use pinn_core::optim::{AdamConfig, LbfgsConfig, TrainPlan};
use pinn_core::pde::{OperatorKind, OperatorSpec, PdeProblem, Region};
use pinn_core::sampling::{DistributionConstants, Generator};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub problem: ProblemConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// `-u'' = f` on (-1, 1), `u* = tanh x`.
    PoissonTanh,
    /// `-u'' = f` on (-1, 1), `u* = (1 - x²) sin 6πx`.
    PoissonSin6pi,
    /// `-u_t + ν u_xx = f` on (-1, 1) × (0, 1], `u* = sin(πx) e^{-t}`.
    HeatSin,
    /// Operator, domain and exact solution given explicitly.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Diffusion coefficient of the heat problem.
    #[serde(default = "one")]
    pub nu: f64,
    /// Points per input axis of the error grid (time last).
    #[serde(default)]
    pub eval_grid: Vec<usize>,
    /// Report errors relative to the norms of the exact solution.
    #[serde(default)]
    pub relative_errors: bool,
    // Custom problems only.
    pub operator: Option<OperatorKind>,
    /// Row-major diffusion matrix `a_ij`.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<f64>>,
    pub c: Option<f64>,
    pub space: Option<Vec<(f64, f64)>>,
    pub t_end: Option<f64>,
    pub exact: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "no_wrapper")]
    pub wrapper: Wrapper,
}

fn no_wrapper() -> Wrapper {
    Wrapper::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub generator: Generator,
    /// Residual points; derived from `m_b1` for parabolic problems when
    /// omitted.
    pub m_r: Option<usize>,
    /// Points per boundary group.
    pub m_b: Option<Vec<usize>>,
    /// Points on the first lateral boundary of a parabolic problem; sets
    /// `m_b = [m_b1, m_b1, 2 m_b1]` and `m_r = 2 m_b1²`.
    pub m_b1: Option<usize>,
    pub adam_epochs: usize,
    /// Residual points per Adam step, 0 for the full set.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: Generator::Equidistant,
            m_r: None,
            m_b: None,
            m_b1: None,
            adam_epochs: 0,
            batch_size: 0,
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig {
                max_iter: 0,
                ..LbfgsConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_r: f64,
    /// One weight per boundary group; a single value is broadcast.
    pub lambda_b: Vec<f64>,
    pub schedule: ScheduleKind,
    /// Regularization weights used by the constant schedule.
    pub reg_r: f64,
    pub reg_b: Vec<f64>,
    /// Hölder exponent of the theory schedule.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_r: 1.0,
            lambda_b: vec![1.0],
            schedule: ScheduleKind::Constant,
            reg_r: 0.0,
            reg_b: Vec::new(),
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Values of `m_r`, or of `m_b1` for parabolic problems.
    pub ladder: Vec<usize>,
    pub repeats: usize,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ladder: vec![10, 32, 100, 316, 1000],
            repeats: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Xavier-initialized networks checked against the loss bound.
    pub networks: usize,
    pub alpha: f64,
    /// Probes per free axis for quadrature and covering radii.
    pub probes: usize,
    /// Smallest accepted `rhs - lhs`.
    pub slack_tol: f64,
    /// Overrides of the uniform distribution constants.
    pub c_r: Option<f64>,
    #[serde(rename = "C_r")]
    pub big_c_r: Option<f64>,
    pub c_b: Option<f64>,
    #[serde(rename = "C_b")]
    pub big_c_b: Option<f64>,
    /// Sample count, trials and interval of the sampling experiment.
    pub sampling_n: usize,
    pub sampling_trials: usize,
    pub sampling_interval: (f64, f64),
    pub sampling_probes: usize,
    /// Allowed shortfall of the empirical probability below the bound.
    pub sampling_margin: f64,
    /// Seeded (network, point) pairs of the derivative check.
    pub gradcheck_pairs: usize,
    pub derivative_tol: f64,
    pub gradient_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            networks: 20,
            alpha: 1.0,
            probes: 1000,
            slack_tol: 1e-9,
            c_r: None,
            big_c_r: None,
            c_b: None,
            big_c_b: None,
            sampling_n: 100,
            sampling_trials: 2000,
            sampling_interval: (0.0, 1.0),
            sampling_probes: 10_000,
            sampling_margin: 0.01,
            gradcheck_pairs: 20,
            derivative_tol: 1e-4,
            gradient_tol: 1e-5,
        }
    }
}

/// Sample counts of one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub m_r: usize,
    pub m_b: Vec<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.problem()?;
        cfg.architecture()?;
        Ok(cfg)
    }

    pub fn problem(&self) -> Result<PdeProblem> {
        let p = &self.problem;
        let custom = [
            p.operator.is_some(),
            p.a.is_some(),
            p.b.is_some(),
            p.c.is_some(),
            p.space.is_some(),
            p.t_end.is_some(),
            p.exact.is_some(),
        ];
        if p.kind != ProblemKind::Custom && custom.iter().any(|&c| c) {
            bail!("problem.kind = {:?} takes no operator/a/b/c/space/t_end/exact fields", p.kind);
        }
        Ok(match p.kind {
            ProblemKind::PoissonTanh => PdeProblem::poisson_tanh(),
            ProblemKind::PoissonSin6pi => PdeProblem::poisson_sin6pi(),
            ProblemKind::HeatSin => PdeProblem::heat_sin(p.nu).context("problem.nu")?,
            ProblemKind::Custom => {
                let kind = p.operator.context("problem.operator is required for custom problems")?;
                let space = p.space.clone().context("problem.space is required for custom problems")?;
                let n = space.len();
                let a = p.a.clone().context("problem.a is required for custom problems")?;
                let b = p.b.clone().unwrap_or_else(|| vec![0.0; n]);
                let op = OperatorSpec::new(kind, &a, &b, p.c.unwrap_or(0.0)).context("problem.a/b/c")?;
                let exact = p.exact.as_deref().context("problem.exact is required for custom problems")?;
                PdeProblem::new(op, space, p.t_end, exact).context("problem")?
            }
        })
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let n = &self.network;
        Architecture::new(n.widths.clone(), n.residual, n.wrapper).context("network")
    }

    pub fn plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            adam_epochs: self.train.adam_epochs,
            batch_size: self.train.batch_size,
            seed,
            adam: self.train.adam,
            lbfgs: self.train.lbfgs,
        }
    }

    /// Sample counts from the `[train]` section.
    pub fn sizes(&self, problem: &PdeProblem) -> Result<Sizes> {
        let t = &self.train;
        resolve_sizes(problem, t.m_r, t.m_b1, t.m_b.as_deref())
    }

    /// Sample counts for one sweep ladder entry.
    pub fn sweep_sizes(&self, problem: &PdeProblem, m: usize) -> Result<Sizes> {
        if problem.op().kind() == OperatorKind::Parabolic {
            resolve_sizes(problem, None, Some(m), None)
        } else {
            resolve_sizes(problem, Some(m), self.train.m_b1, self.train.m_b.as_deref())
        }
    }

    pub fn base_weights(&self, groups: usize) -> Result<LossWeights> {
        let l = &self.loss;
        let lambda_b = broadcast(&l.lambda_b, groups, "loss.lambda_b")?;
        let reg_b = if l.reg_b.is_empty() {
            vec![0.0; groups]
        } else {
            broadcast(&l.reg_b, groups, "loss.reg_b")?
        };
        let w = LossWeights {
            lambda_r: l.lambda_r,
            lambda_b,
            reg_r: l.reg_r,
            reg_b,
        };
        w.validate(groups).context("loss")?;
        Ok(w)
    }

    /// Loss weights for the given sizes under the configured schedule, with
    /// the bound constant `C_m` of the theory schedule.
    pub fn weights(&self, problem: &PdeProblem, sizes: &Sizes) -> Result<(LossWeights, Option<f64>)> {
        let base = self.base_weights(problem.groups().len())?;
        let constants = match self.loss.schedule {
            ScheduleKind::Theory => Some(DistributionConstants::uniform(problem, self.loss.alpha)?),
            _ => None,
        };
        let s = loss::holder_schedule(self.loss.schedule, sizes.m_r, &sizes.m_b, constants.as_ref(), &base)
            .context("loss.schedule")?;
        Ok((s.weights, s.c_m))
    }

    pub fn eval_counts(&self, problem: &PdeProblem) -> Vec<usize> {
        if !self.problem.eval_grid.is_empty() {
            return self.problem.eval_grid.clone();
        }
        match problem.input_dim() {
            1 => vec![10_000],
            2 if problem.t_end().is_some() => vec![400, 200],
            d => vec![100; d],
        }
    }

    /// Distribution constants for the bound check, uniform unless
    /// overridden in `[verify]`. Overrides are only range-checked so that
    /// a broken constant reaches the bound check.
    pub fn constants(&self, problem: &PdeProblem) -> Result<DistributionConstants> {
        let v = &self.verify;
        let u = DistributionConstants::uniform(problem, v.alpha)?;
        let k = DistributionConstants {
            c_r: v.c_r.unwrap_or(u.c_r),
            big_c_r: v.big_c_r.unwrap_or(u.big_c_r),
            c_b: v.c_b.unwrap_or(u.c_b),
            big_c_b: v.big_c_b.unwrap_or(u.big_c_b),
            ..u
        };
        k.validate_ranges().context("verify constants")?;
        Ok(k)
    }
}

fn broadcast(v: &[f64], n: usize, field: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        k if k == n => Ok(v.to_vec()),
        k => bail!("{field} has {k} entries but the problem has {n} boundary groups"),
    }
}

/// Resolves sample counts. Finite boundary groups always use all of their
/// points; parabolic problems may derive everything from `m_b1`.
pub fn resolve_sizes(
    problem: &PdeProblem,
    m_r: Option<usize>,
    m_b1: Option<usize>,
    m_b: Option<&[usize]>,
) -> Result<Sizes> {
    let groups = problem.groups();
    let parabolic = problem.op().kind() == OperatorKind::Parabolic;
    if let Some(mb) = m_b {
        if m_b1.is_some() {
            bail!("train.m_b and train.m_b1 are mutually exclusive");
        }
        if mb.len() != groups.len() {
            bail!("train.m_b has {} entries but the problem has {} boundary groups", mb.len(), groups.len());
        }
        let m_r = m_r.context("train.m_r is required with train.m_b")?;
        return Ok(Sizes { m_r, m_b: mb.to_vec() });
    }
    if parabolic {
        let k = m_b1.context("train.m_b1 (or train.m_b) is required for parabolic problems")?;
        if groups.len() != 3 {
            bail!("train.m_b1 expansion needs two lateral groups and one initial group");
        }
        let derived = 2 * k * k;
        if let Some(m) = m_r {
            if m != derived {
                bail!("train.m_r = {m} contradicts m_r = 2 m_b1² = {derived}");
            }
        }
        return Ok(Sizes {
            m_r: derived,
            m_b: vec![k, k, 2 * k],
        });
    }
    let m_r = m_r.context("train.m_r is required")?;
    let m_b = groups
        .iter()
        .map(|g| match &g.region {
            Region::Points(p) => Ok(p.len()),
            Region::Box(_) => m_b1.context("train.m_b or train.m_b1 is required for this boundary"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sizes { m_r, m_b })
}
