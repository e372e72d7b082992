//! Bound verification and finite-difference gradient checks.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pinn_core::analysis::{self, BoundReport, SamplingReport};
use pinn_core::jets::{forward_jet, Jet3};
use pinn_core::loss::{self, LossData, LossWeights};
use pinn_core::network::Network;
use pinn_core::pde::{Axis, PdeProblem, Region};
use pinn_core::sampling::{Generator, TrainingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::pretty_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bounds: Vec<BoundReport>,
    pub min_slack: f64,
    pub sampling: SamplingReport,
    pub pass: bool,
}

/// Loss-bound reports for `[verify] networks` Xavier networks (seeds
/// `seed, seed + 1, …`) on the `[train]` training set, plus the sampling
/// experiment.
pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let problem = cfg.problem()?;
    let arch = cfg.architecture()?;
    let sizes = cfg.sizes(&problem)?;
    let set = TrainingSet::generate(&problem, cfg.train.generator, sizes.m_r, &sizes.m_b, cfg.seed)?;
    let weights = cfg.base_weights(problem.groups().len())?;
    let constants = cfg.constants(&problem)?;
    let bounds = (0..v.networks)
        .map(|i| {
            let net = Network::xavier(arch.clone(), cfg.seed + i as u64);
            analysis::check_lemma_bound(&net, &problem, &set, &weights, v.alpha, &constants, v.probes)
                .with_context(|| format!("bound check for network {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let min_slack = bounds.iter().map(|b| b.slack).fold(f64::INFINITY, f64::min);
    let (a, b) = v.sampling_interval;
    if !(a < b) {
        bail!("verify.sampling_interval must satisfy lo < hi");
    }
    let region = Region::Box(vec![Axis::Interval(a, b)]);
    let sampling = analysis::sampling_probability_experiment(
        v.sampling_n,
        v.sampling_trials,
        &region,
        1.0 / (b - a),
        cfg.seed,
        v.sampling_probes,
    )?;
    let sampling_ok = sampling
        .empirical
        .map_or(true, |p| p >= sampling.bound - v.sampling_margin);
    Ok(VerifyReport {
        pass: min_slack >= -v.slack_tol && sampling_ok,
        bounds,
        min_slack,
        sampling,
    })
}

/// Writes `verify.json`; fails naming the first violated report.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<VerifyReport> {
    let report = verify(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("verify.json"), pretty_json(&report)?)?;
    let tol = cfg.verify.slack_tol;
    if let Some((i, b)) = report.bounds.iter().enumerate().find(|(_, b)| b.slack < -tol) {
        bail!(
            "loss bound violated for network {i}: slack {:e} with C_m = {:e} (lhs {:e}, rhs {:e})\n{}",
            b.slack,
            b.c_m,
            b.lhs,
            b.rhs,
            pretty_json(b)?
        );
    }
    let s = &report.sampling;
    if let Some(p) = s.empirical {
        if p < s.bound - cfg.verify.sampling_margin {
            bail!("covering probability {p} below bound {} - {}", s.bound, cfg.verify.sampling_margin);
        }
    }
    Ok(report)
}

/// Worst error per checked quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelError {
    pub channel: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub channels: Vec<ChannelError>,
    /// Parameters left out because a perturbation moved the max term.
    pub skipped_ties: usize,
    pub pass: bool,
}

const H_X: f64 = 1e-5;
const H_P: f64 = 1e-6;
/// Parameters probed per network for the loss gradients.
const PARAM_PROBES: usize = 200;
/// Networks used for the loss gradients.
const LOSS_NETWORKS: usize = 3;

/// Relative difference with a unit floor on the scale.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn random_point(problem: &PdeProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let Region::Box(axes) = problem.interior() else {
        unreachable!("interiors are boxes")
    };
    axes.iter()
        .map(|a| match *a {
            Axis::Interval(lo, hi) => {
                let pad = 0.05 * (hi - lo);
                rng.gen_range(lo + pad..hi - pad)
            }
            Axis::Fixed(c) => c,
        })
        .collect()
}

fn jet_at(net: &Network, x: &[f64]) -> Result<Jet3> {
    Ok(forward_jet(net, x)?)
}

/// Derivative channels `d1`, `d2`, `d3` against central differences of the
/// channel one order below.
fn channel_errors(net: &Network, x: &[f64]) -> Result<[f64; 3]> {
    let d = x.len();
    let j = jet_at(net, x)?;
    let mut worst = [0.0f64; 3];
    for a in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[a] += H_X;
        xm[a] -= H_X;
        let (p, m) = (jet_at(net, &xp)?, jet_at(net, &xm)?);
        let fd = |u: f64, v: f64| (u - v) / (2.0 * H_X);
        worst[0] = worst[0].max(rel(j.d1[a], fd(p.value, m.value)));
        for b in 0..d {
            worst[1] = worst[1].max(rel(j.d2[a][b], fd(p.d1[b], m.d1[b])));
            for c in 0..d {
                worst[2] = worst[2].max(rel(j.d3[a][b][c], fd(p.d2[b][c], m.d2[b][c])));
            }
        }
    }
    Ok(worst)
}

/// Norm-wise relative error of the loss gradient on a seeded subset of
/// parameters, and the number of indices skipped at max-term ties.
fn loss_gradient_error(
    net: &Network,
    data: &LossData,
    w: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let base = loss::evaluate(net, data, w, None, true)?;
    let g = base.grad.expect("gradient requested");
    let scale = g.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let n = g.len();
    let idx: Vec<usize> = if n <= PARAM_PROBES {
        (0..n).collect()
    } else {
        (0..PARAM_PROBES).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for k in idx {
        let mut p = net.params().to_vec();
        let h = H_P * p[k].abs().max(1.0);
        p[k] += h;
        let up = loss::evaluate(&net.with_params(p.clone())?, data, w, None, false)?;
        p[k] -= 2.0 * h;
        let dn = loss::evaluate(&net.with_params(p)?, data, w, None, false)?;
        if up.argmax_r != base.argmax_r || dn.argmax_r != base.argmax_r {
            skipped += 1;
            continue;
        }
        worst = worst.max((g[k] - (up.value - dn.value) / (2.0 * h)).abs() / scale);
    }
    Ok((worst, skipped))
}

/// Finite-difference checks of the derivative channels at
/// `[verify] gradcheck_pairs` seeded (network, point) pairs and of the PINN
/// and LIPR parameter gradients. `networks` supplies the network for each
/// seed.
pub fn gradcheck_with(cfg: &RunConfig, networks: impl Fn(u64) -> Network) -> Result<GradcheckReport> {
    let v = &cfg.verify;
    let problem = cfg.problem()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut deriv = [0.0f64; 3];
    for i in 0..v.gradcheck_pairs {
        let net = networks(cfg.seed + i as u64);
        let x = random_point(&problem, &mut rng);
        let e = channel_errors(&net, &x)?;
        for (w, e) in deriv.iter_mut().zip(e) {
            *w = w.max(e);
        }
    }

    let groups = problem.groups().len();
    let m_b: Vec<usize> = vec![4; groups];
    let set = TrainingSet::generate(&problem, Generator::IidUniform, 16, &m_b, cfg.seed)?;
    let data = LossData::new(&problem, &set)?;
    let pinn = cfg.base_weights(groups)?;
    let pinn = LossWeights {
        reg_r: 0.0,
        reg_b: vec![0.0; groups],
        ..pinn
    };
    let lipr = LossWeights {
        reg_r: 0.01,
        reg_b: vec![0.01; groups],
        ..pinn.clone()
    };
    let (mut e_pinn, mut e_lipr, mut skipped) = (0.0f64, 0.0f64, 0);
    for i in 0..LOSS_NETWORKS.min(v.gradcheck_pairs.max(1)) {
        let net = networks(cfg.seed + i as u64);
        let (e, _) = loss_gradient_error(&net, &data, &pinn, &mut rng)?;
        e_pinn = e_pinn.max(e);
        let (e, s) = loss_gradient_error(&net, &data, &lipr, &mut rng)?;
        e_lipr = e_lipr.max(e);
        skipped += s;
    }

    let mk = |name: &str, err: f64, tol: f64| ChannelError {
        channel: name.into(),
        max_rel_error: err,
        tol,
        pass: err <= tol && err.is_finite(),
    };
    let channels = vec![
        mk("d1", deriv[0], v.derivative_tol),
        mk("d2", deriv[1], v.derivative_tol),
        mk("d3", deriv[2], v.derivative_tol),
        mk("pinn_grad", e_pinn, v.gradient_tol),
        mk("lipr_grad", e_lipr, v.gradient_tol),
    ];
    let pass = channels.iter().all(|c| c.pass);
    Ok(GradcheckReport {
        channels,
        skipped_ties: skipped,
        pass,
    })
}

pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let arch = cfg.architecture()?;
    gradcheck_with(cfg, |seed| Network::xavier(arch.clone(), seed))
}

/// Writes `gradcheck.json`; fails when a channel exceeds its tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<GradcheckReport> {
    let report = gradcheck(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("gradcheck.json"), pretty_json(&report)?)?;
    if let Some(c) = report.channels.iter().find(|c| !c.pass) {
        bail!(
            "gradient check failed on channel {}: {:e} > {:e}",
            c.channel,
            c.max_rel_error,
            c.tol
        );
    }
    Ok(report)
}
