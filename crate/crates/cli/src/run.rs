//! A single training run: data, training, evaluation and artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use pinn_core::analysis::{self, ErrorReport, EvalGrid};
use pinn_core::loss::{self, LossData, LossWeights};
use pinn_core::network::Network;
use pinn_core::optim::{self, HistoryRow, LbfgsStatus, Phase};
use pinn_core::sampling::TrainingSet;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Sizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Training stopped on a non-finite loss or gradient.
    Failed,
}

/// Deterministic outcome of a run; written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub status: RunStatus,
    pub m_r: usize,
    pub m_b: Vec<usize>,
    pub seed: u64,
    pub final_loss: f64,
    pub errors: Option<ErrorReport>,
    pub lbfgs_status: Option<LbfgsStatus>,
    pub failure: Option<String>,
}

/// Everything needed to reproduce a run; written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub sizes: Sizes,
    pub weights: LossWeights,
    #[serde(rename = "C_m")]
    pub c_m: Option<f64>,
    pub param_count: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: Manifest,
    pub network: Network,
    pub history: Vec<HistoryRow>,
    pub wall_ms: f64,
}

impl RunOutput {
    pub fn metrics(&self) -> &Metrics {
        &self.manifest.metrics
    }
}

/// Trains with `seed` on the given sample counts and evaluates the result.
/// Training failures are reported through [`RunStatus::Failed`] with the
/// last finite network; configuration errors are returned as `Err`.
pub fn execute(cfg: &RunConfig, sizes: &Sizes, seed: u64) -> Result<RunOutput> {
    let start = Instant::now();
    let problem = cfg.problem()?;
    let arch = cfg.architecture()?;
    if arch.input_dim() != problem.input_dim() {
        anyhow::bail!(
            "network.widths starts with {} inputs but the problem has {}",
            arch.input_dim(),
            problem.input_dim()
        );
    }
    let set = TrainingSet::generate(&problem, cfg.train.generator, sizes.m_r, &sizes.m_b, seed)
        .context("train: generating training points")?;
    let actual = Sizes {
        m_r: set.m_r(),
        m_b: set.m_b(),
    };
    let (weights, c_m) = cfg.weights(&problem, &actual)?;
    let data = LossData::new(&problem, &set)?;
    let init = Network::xavier(arch, seed);
    let param_count = init.params().len();

    let (network, history, final_loss, lbfgs_status, failure) =
        match optim::train(init, &data, &weights, &cfg.plan(seed)) {
            Ok(out) => (
                out.network,
                out.history,
                out.final_loss,
                out.lbfgs.map(|r| r.status),
                None,
            ),
            Err(f) => {
                let last = loss::evaluate(&f.network, &data, &weights, None, false)
                    .map(|e| e.value)
                    .unwrap_or(f64::NAN);
                let msg = format!("{f}");
                (f.network, f.history, last, None, Some(msg))
            }
        };
    let errors = if failure.is_none() {
        let grid = EvalGrid::over(&problem, &cfg.eval_counts(&problem))?;
        Some(analysis::discrete_error(&network, &problem, &grid, cfg.problem.relative_errors)?)
    } else {
        None
    };
    let metrics = Metrics {
        status: if failure.is_none() { RunStatus::Ok } else { RunStatus::Failed },
        m_r: actual.m_r,
        m_b: actual.m_b.clone(),
        seed,
        final_loss,
        errors,
        lbfgs_status,
        failure,
    };
    Ok(RunOutput {
        manifest: Manifest {
            config: RunConfig { seed, ..cfg.clone() },
            sizes: actual,
            weights,
            c_m,
            param_count,
            metrics,
        },
        network,
        history,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Writes `manifest.json`, `metrics.json`, `history.csv` and
/// `checkpoint.json` into `dir`.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("manifest.json"), pretty_json(&out.manifest)?)?;
    fs::write(dir.join("metrics.json"), pretty_json(out.metrics())?)?;
    let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
    w.write_record(["phase", "step", "loss"])?;
    for row in &out.history {
        let phase = match row.phase {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        };
        w.write_record([phase, &row.step.to_string(), &row.loss.to_string()])?;
    }
    w.flush()?;
    out.network
        .save(out.manifest.config.seed, &dir.join("checkpoint.json"))
        .context("writing checkpoint")?;
    Ok(())
}

pub(crate) fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Trains from the `[train]` section and writes artifacts into `out`.
/// Returns an error after writing partial artifacts when training failed.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let problem = cfg.problem()?;
    let sizes = cfg.sizes(&problem)?;
    let run = execute(cfg, &sizes, cfg.seed)?;
    write_artifacts(&run, out)?;
    if let Some(msg) = &run.metrics().failure {
        anyhow::bail!("{msg} (partial artifacts in {})", out.display());
    }
    Ok(run)
}
