//! Convergence sweeps over a ladder of sample counts.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pinn_core::analysis::{fit_rate, RateFit};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Sizes};
use crate::run::{self, pretty_json, RunStatus};

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "m_r", "m_b1", "m_b2", "m_b3", "seed", "loss_final", "l2", "h1", "l2_l2", "l2_h1", "wall_ms", "status",
];

/// One training of the sweep. Absent metrics are written as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m_r: usize,
    pub m_b1: Option<usize>,
    pub m_b2: Option<usize>,
    pub m_b3: Option<usize>,
    pub seed: u64,
    pub loss_final: Option<f64>,
    pub l2: Option<f64>,
    pub h1: Option<f64>,
    pub l2_l2: Option<f64>,
    pub l2_h1: Option<f64>,
    pub wall_ms: f64,
    pub status: String,
}

impl SweepRow {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "l2" => self.l2,
            "h1" => self.h1,
            "l2_l2" => self.l2_l2,
            "l2_h1" => self.l2_h1,
            _ => None,
        }
    }
}

/// Arithmetic means of successful repeats at one ladder entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderMean {
    pub m_r: usize,
    pub runs: usize,
    pub l2: Option<f64>,
    pub h1: Option<f64>,
    pub l2_l2: Option<f64>,
    pub l2_h1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub means: Vec<LadderMean>,
    /// Fitted `(metric, fit)` against `m_r`, for every metric with at least
    /// two positive ladder means.
    pub slopes: Vec<(String, RateFit)>,
}

impl SweepResult {
    pub fn slope(&self, metric: &str) -> Option<f64> {
        self.slopes.iter().find(|(m, _)| m == metric).map(|(_, f)| f.slope)
    }
}

const METRICS: [&str; 4] = ["l2", "h1", "l2_l2", "l2_h1"];

/// Per-entry means and slopes recomputed from rows, so a parsed CSV gives
/// back the same numbers.
pub fn summarize(rows: Vec<SweepRow>) -> Result<SweepResult> {
    let mut ladder: Vec<usize> = Vec::new();
    for r in &rows {
        if !ladder.contains(&r.m_r) {
            ladder.push(r.m_r);
        }
    }
    let means: Vec<LadderMean> = ladder
        .iter()
        .map(|&m| {
            let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.m_r == m && r.status == "ok").collect();
            let mean = |name: &str| {
                let v: Vec<f64> = ok.iter().filter_map(|r| r.metric(name)).collect();
                (!v.is_empty() && v.len() == ok.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            LadderMean {
                m_r: m,
                runs: ok.len(),
                l2: mean("l2"),
                h1: mean("h1"),
                l2_l2: mean("l2_l2"),
                l2_h1: mean("l2_h1"),
            }
        })
        .collect();
    let mut slopes = Vec::new();
    for name in METRICS {
        let pairs: Vec<(f64, f64)> = means
            .iter()
            .filter_map(|m| {
                let v = match name {
                    "l2" => m.l2,
                    "h1" => m.h1,
                    "l2_l2" => m.l2_l2,
                    _ => m.l2_h1,
                };
                v.filter(|&e| e > 0.0).map(|e| (m.m_r as f64, e))
            })
            .collect();
        let distinct = pairs.iter().any(|p| p.0 != pairs[0].0);
        if pairs.len() >= 2 && distinct {
            slopes.push((name.to_string(), fit_rate(&pairs)?));
        }
    }
    Ok(SweepResult { rows, means, slopes })
}

/// One ladder entry of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepJob {
    pub sizes: Sizes,
    pub seed: u64,
}

/// Ladder entries in order, repeats innermost with seeds `seed + r`.
pub fn jobs(cfg: &RunConfig) -> Result<Vec<SweepJob>> {
    if cfg.sweep.ladder.is_empty() {
        bail!("sweep.ladder must not be empty");
    }
    if cfg.sweep.repeats == 0 {
        bail!("sweep.repeats must be at least 1");
    }
    let problem = cfg.problem()?;
    let mut out = Vec::new();
    for &m in &cfg.sweep.ladder {
        let sizes = cfg.sweep_sizes(&problem, m)?;
        for r in 0..cfg.sweep.repeats {
            out.push(SweepJob {
                sizes: sizes.clone(),
                seed: cfg.seed + r as u64,
            });
        }
    }
    Ok(out)
}

fn failed_row(job: &SweepJob, status: String) -> SweepRow {
    let mb = |i: usize| job.sizes.m_b.get(i).copied();
    SweepRow {
        m_r: job.sizes.m_r,
        m_b1: mb(0),
        m_b2: mb(1),
        m_b3: mb(2),
        seed: job.seed,
        loss_final: None,
        l2: None,
        h1: None,
        l2_l2: None,
        l2_h1: None,
        wall_ms: 0.0,
        status,
    }
}

/// Trains and evaluates one job with the real pipeline.
pub fn train_row(cfg: &RunConfig, job: &SweepJob) -> Result<SweepRow> {
    let out = run::execute(cfg, &job.sizes, job.seed)?;
    let m = out.metrics();
    let e = m.errors.as_ref();
    let mut row = failed_row(job, String::new());
    row.m_r = m.m_r;
    row.loss_final = m.final_loss.is_finite().then_some(m.final_loss);
    row.l2 = e.map(|e| e.l2);
    row.h1 = e.map(|e| e.h1);
    row.l2_l2 = e.and_then(|e| e.l2_l2);
    row.l2_h1 = e.and_then(|e| e.l2_h1);
    row.wall_ms = out.wall_ms;
    row.status = match m.status {
        RunStatus::Ok => "ok".into(),
        RunStatus::Failed => "failed".into(),
    };
    Ok(row)
}

/// Runs every job on a pool of `workers` threads with an injectable runner.
/// Rows come back in ladder order; runner errors become `failed` rows.
pub fn run_sweep_with<F>(cfg: &RunConfig, workers: usize, runner: F) -> Result<SweepResult>
where
    F: Fn(&RunConfig, &SweepJob) -> Result<SweepRow> + Sync,
{
    let jobs = jobs(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building the worker pool")?;
    let rows: Vec<SweepRow> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|job| runner(cfg, job).unwrap_or_else(|e| failed_row(job, format!("failed: {e:#}"))))
            .collect()
    });
    summarize(rows)
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        bail!("unexpected sweep CSV header {header:?}");
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Runs the configured sweep and writes `sweep.csv` and `summary.json`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, workers: usize) -> Result<SweepResult> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let result = run_sweep_with(cfg, workers, train_row)?;
    write_csv(&result.rows, &out.join("sweep.csv"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a RunConfig,
        means: &'a [LadderMean],
        slopes: &'a [(String, RateFit)],
    }
    let summary = Summary {
        config: cfg,
        means: &result.means,
        slopes: &result.slopes,
    };
    fs::write(out.join("summary.json"), pretty_json(&summary)?)?;
    Ok(result)
}
