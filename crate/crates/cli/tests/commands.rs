//! End-to-end behaviour of the train, sweep, verify and gradcheck commands.

use std::fs;
use std::process::Command;

use pinn_cli::config::{RunConfig, Sizes};
use pinn_cli::sweep::{self, SweepJob, SweepRow};
use pinn_cli::verify;
use pinn_cli::{cmd_gradcheck, cmd_sweep, cmd_train, cmd_verify};
use pinn_core::analysis::{discrete_error, EvalGrid};
use pinn_core::network::Network;
use pinn_core::pde::PdeProblem;

const TANH: &str = r#"
seed = 3
[problem]
kind = "poisson_tanh"
eval_grid = [2001]
[network]
widths = [1, 8, 8, 1]
residual = true
[train]
m_r = 20
adam_epochs = 30
[loss]
lambda_b = [1.0]
"#;

fn tanh_config() -> RunConfig {
    RunConfig::parse(TANH).unwrap()
}

#[test]
fn zero_epoch_run_reports_the_initial_network() {
    let mut cfg = tanh_config();
    cfg.train.adam_epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let run = cmd_train(&cfg, dir.path()).unwrap();
    let p = PdeProblem::poisson_tanh();
    let init = Network::xavier(cfg.architecture().unwrap(), 3);
    let e = discrete_error(&init, &p, &EvalGrid::over(&p, &[2001]).unwrap(), false).unwrap();
    assert_eq!(run.metrics().errors.as_ref().unwrap(), &e);
    assert_eq!(run.network.params(), init.params());
    for f in ["manifest.json", "metrics.json", "history.csv", "checkpoint.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let cfg = tanh_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_train(&cfg, a.path()).unwrap();
    cmd_train(&cfg, b.path()).unwrap();
    for f in ["metrics.json", "history.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpoint_reload_evaluates_identically() {
    let cfg = tanh_config();
    let dir = tempfile::tempdir().unwrap();
    let run = cmd_train(&cfg, dir.path()).unwrap();
    let (loaded, seed) = Network::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(seed, 3);
    for i in 0..100 {
        let x = [-1.0 + 2.0 * i as f64 / 99.0];
        assert_eq!(
            loaded.evaluate(&x).unwrap(),
            run.network.evaluate(&x).unwrap(),
            "probe {i}"
        );
    }
}

#[test]
fn lipr_run_records_schedule_weight() {
    let text = r#"
[problem]
kind = "poisson_sin6pi"
eval_grid = [1001]
[network]
widths = [1, 6, 6, 1]
residual = true
wrapper = "poisson1d_dirichlet_zero"
[train]
m_r = 50
adam_epochs = 3
batch_size = 20
[loss]
schedule = "poisson_lipr"
"#;
    let cfg = RunConfig::parse(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = cmd_train(&cfg, dir.path()).unwrap();
    let e = run.metrics().errors.clone().unwrap();
    assert!(e.l2.is_finite() && e.h1.is_finite() && e.h1 >= e.l2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["weights"]["reg_r"].as_f64().unwrap(), 50f64.powf(-1.5));
}

#[test]
fn failed_training_leaves_partial_artifacts() {
    let mut cfg = tanh_config();
    cfg.train.adam.lr = f64::INFINITY;
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_train(&cfg, dir.path()).unwrap_err();
    assert!(format!("{err:#}").contains("partial artifacts"), "{err:#}");
    let metrics = fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    assert!(metrics.contains("\"failed\""));
    assert!(dir.path().join("checkpoint.json").exists());
}

/// Runner whose errors are exactly `c / m_r`.
fn stub(_: &RunConfig, job: &SweepJob) -> anyhow::Result<SweepRow> {
    let e = 3.0 / job.sizes.m_r as f64;
    Ok(SweepRow {
        m_r: job.sizes.m_r,
        m_b1: job.sizes.m_b.first().copied(),
        m_b2: job.sizes.m_b.get(1).copied(),
        m_b3: job.sizes.m_b.get(2).copied(),
        seed: job.seed,
        loss_final: Some(e * e),
        l2: Some(e),
        h1: Some(2.0 * e),
        l2_l2: None,
        l2_h1: None,
        wall_ms: 1.0,
        status: "ok".into(),
    })
}

#[test]
fn two_entry_ladder_gives_two_rows() {
    let mut cfg = tanh_config();
    cfg.sweep.ladder = vec![10, 100];
    cfg.sweep.repeats = 1;
    let res = sweep::run_sweep_with(&cfg, 2, stub).unwrap();
    assert_eq!(res.rows.len(), 2);
    assert_eq!(res.rows.iter().map(|r| r.m_r).collect::<Vec<_>>(), [10, 100]);
}

#[test]
fn stub_errors_give_unit_slope() {
    let mut cfg = tanh_config();
    cfg.sweep.ladder = vec![10, 30, 100, 300, 1000];
    cfg.sweep.repeats = 3;
    let res = sweep::run_sweep_with(&cfg, 3, stub).unwrap();
    assert_eq!(res.rows.len(), 15);
    assert!((res.slope("l2").unwrap() + 1.0).abs() < 1e-9);
    assert!((res.slope("h1").unwrap() + 1.0).abs() < 1e-9);
    assert_eq!(res.slope("l2_l2"), None);
}

#[test]
fn heat_ladder_expands_boundary_counts() {
    let text = r#"
[problem]
kind = "heat_sin"
[network]
widths = [2, 4, 4, 1]
[loss]
schedule = "heat_lipr"
[sweep]
ladder = [1, 2, 3, 10, 20, 100]
"#;
    let cfg = RunConfig::parse(text).unwrap();
    let jobs = sweep::jobs(&cfg).unwrap();
    for (job, k) in jobs.iter().zip([1usize, 2, 3, 10, 20, 100]) {
        assert_eq!(job.sizes, Sizes { m_r: 2 * k * k, m_b: vec![k, k, 2 * k] });
    }
}

#[test]
fn csv_round_trip_reproduces_slopes() {
    let mut cfg = tanh_config();
    cfg.sweep.ladder = vec![10, 40, 160];
    cfg.sweep.repeats = 2;
    cfg.train.adam_epochs = 5;
    cfg.problem.eval_grid = vec![501];
    let dir = tempfile::tempdir().unwrap();
    let res = cmd_sweep(&cfg, dir.path(), 2).unwrap();
    assert!(res.rows.iter().all(|r| r.status == "ok"));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), sweep::CSV_COLUMNS.join(","));
    // Elliptic runs leave the Bochner columns empty.
    assert!(text.lines().nth(1).unwrap().contains(",,,"));
    let rows = sweep::read_csv(&dir.path().join("sweep.csv")).unwrap();
    let again = sweep::summarize(rows).unwrap();
    assert_eq!(again.slopes, res.slopes);
    assert_eq!(again.means, res.means);
}

#[test]
fn failing_runs_are_flagged_and_sweep_continues() {
    let mut cfg = tanh_config();
    cfg.sweep.ladder = vec![10, 20];
    let res = sweep::run_sweep_with(&cfg, 1, |c, job| {
        if job.sizes.m_r == 10 {
            anyhow::bail!("boom")
        }
        stub(c, job)
    })
    .unwrap();
    assert!(res.rows[0].status.starts_with("failed"));
    assert_eq!(res.rows[1].status, "ok");
    assert_eq!(res.means[0].runs, 0);
}

const VERIFY: &str = r#"
[problem]
kind = "poisson_tanh"
[network]
widths = [1, 50, 50, 1]
residual = true
[train]
m_r = 100
[verify]
networks = 4
sampling_trials = 200
"#;

#[test]
fn default_verify_passes() {
    let cfg = RunConfig::parse(VERIFY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_verify(&cfg, dir.path()).unwrap();
    assert!(r.pass && r.min_slack >= 0.0);
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn zero_trials_omit_the_empirical_probability() {
    let mut cfg = RunConfig::parse(VERIFY).unwrap();
    cfg.verify.sampling_trials = 0;
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_verify(&cfg, dir.path()).unwrap();
    assert_eq!(r.sampling.empirical, None);
    let json = fs::read_to_string(dir.path().join("verify.json")).unwrap();
    assert!(json.contains("\"empirical\": null"));
}

#[test]
fn corrupted_constants_fail_naming_c_m() {
    let mut cfg = RunConfig::parse(VERIFY).unwrap();
    cfg.verify.big_c_r = Some(0.01);
    cfg.verify.big_c_b = Some(0.01);
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_verify(&cfg, dir.path()).unwrap_err();
    assert!(format!("{err:#}").contains("C_m"), "{err:#}");
}

#[test]
fn gradcheck_passes_and_fails_as_configured() {
    let mut cfg = RunConfig::parse(VERIFY).unwrap();
    cfg.network.widths = vec![1, 12, 12, 1];
    cfg.verify.gradcheck_pairs = 5;
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_gradcheck(&cfg, dir.path()).unwrap();
    assert!(r.pass, "{r:?}");

    let arch = cfg.architecture().unwrap();
    let zero = verify::gradcheck_with(&cfg, |_| Network::zeros(arch.clone())).unwrap();
    assert!(zero.pass && zero.channels.iter().all(|c| c.max_rel_error == 0.0));

    cfg.verify.derivative_tol = 0.0;
    cfg.verify.gradient_tol = 0.0;
    assert!(cmd_gradcheck(&cfg, dir.path()).is_err());
}

#[test]
fn binary_trains_and_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, TANH.replace("adam_epochs = 30", "adam_epochs = 2")).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_pinn"))
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let metrics = fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"seed\": 9"));

    fs::write(&cfg_path, TANH.replace("m_r = 20", "m_r = 20\nlearning_rate = 1")).unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_pinn"))
        .args(["train", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("learning_rate"));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap();
            let problem = cfg.problem().unwrap();
            sweep::jobs(&cfg).unwrap();
            cfg.sizes(&problem).unwrap();
            n += 1;
        }
    }
    assert!(n >= 4);
}
