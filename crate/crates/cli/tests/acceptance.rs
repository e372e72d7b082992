//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The LIPR slope sweep takes about an hour of single-core time. The heat
//! sweep takes about 14 hours at its training budget and only runs when
//! `PINN_ACCEPTANCE_FULL=1` is set; otherwise it is reported as `SKIP`.
//! Numeric arguments select criteria, e.g. `cargo test --test acceptance --
//! 1 6`.

use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Result};
use pinn_cli::config::RunConfig;
use pinn_cli::run;
use pinn_cli::sweep;
use pinn_cli::verify;
use pinn_core::analysis;
use pinn_core::loss::{self, LossWeights, ScheduleKind};
use pinn_core::optim::{adam_step, lbfgs_minimize, AdamConfig, AdamState, LbfgsConfig};
use pinn_core::pde::{Axis, PdeProblem, Region};
use pinn_core::sampling::{equidistant, DistributionConstants};

const DERIVATIVE_TOL: f64 = 1e-4;
const GRADIENT_TOL: f64 = 1e-5;
const IDENTITY_TOL: f64 = 1e-12;
const TANH_L2_TOL: f64 = 1e-4;
const LIPR_L2_BAND: (f64, f64) = (-1.4, -0.6);
const LIPR_H1_BAND: (f64, f64) = (-1.4, -0.5);
const HEAT_L2_BAND: (f64, f64) = (-1.4, -0.6);
const HEAT_H1_BAND: (f64, f64) = (-1.2, -0.3);
const SLACK_TOL: f64 = 1e-9;
const SAMPLING_BOUND: f64 = 0.999734;
const SAMPLING_MARGIN: f64 = 0.01;
const SCHEDULE_TOL: f64 = 1e-9;
const QUADRATIC_TOL: f64 = 1e-10;
const ROSENBROCK_TOL: f64 = 1e-8;
const ADAM_TOL: f64 = 1e-12;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn full_budget() -> bool {
    std::env::var("PINN_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn derivative_oracle() -> Result<Outcome> {
    let cfg = RunConfig::parse(
        r#"
[problem]
kind = "poisson_tanh"
[network]
widths = [1, 50, 50, 1]
residual = true
[verify]
gradcheck_pairs = 20
"#,
    )?;
    ensure!(cfg.verify.derivative_tol == DERIVATIVE_TOL && cfg.verify.gradient_tol == GRADIENT_TOL);
    let mut worst = Vec::new();
    let mut pass = true;
    for (kind, widths, residual, wrapper) in [
        ("poisson_tanh", "[1, 50, 50, 1]", true, "none"),
        ("poisson_sin6pi", "[1, 50, 50, 1]", true, "poisson1d_dirichlet_zero"),
        ("heat_sin", "[2, 50, 50, 1]", false, "none"),
    ] {
        let mut c = RunConfig::parse(&format!(
            "[problem]\nkind = \"{kind}\"\n[network]\nwidths = {widths}\nresidual = {residual}\nwrapper = \"{wrapper}\"\n"
        ))?;
        c.verify = cfg.verify.clone();
        let r = verify::gradcheck(&c)?;
        pass &= r.pass;
        let w = r.channels.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        worst.push(format!("{kind} {w:.1e}"));
    }
    Ok(check(pass, format!("20 pairs per problem, worst {}", worst.join(", "))))
}

fn manufactured_identity() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for p in [PdeProblem::poisson_tanh(), PdeProblem::poisson_sin6pi(), PdeProblem::heat_sin(1.0)?] {
        let xs = equidistant(-0.999, 0.999, 1000)?;
        let ts = equidistant(0.001, 1.0, 1000)?;
        for (i, &x) in xs.iter().enumerate() {
            let pt: Vec<f64> = if p.input_dim() == 2 { vec![x, ts[(7 * i) % 1000]] } else { vec![x] };
            let r = p.op().residual(&p.exact_jet(&pt)?)?;
            worst = worst.max((r - p.f(&pt)?).abs());
        }
    }
    Ok(check(worst < IDENTITY_TOL, format!("max |L[u*] - f| = {worst:.2e} over 3 x 1000 points")))
}

fn tanh_case() -> Result<Outcome> {
    let cfg = RunConfig::parse(
        r#"
[problem]
kind = "poisson_tanh"
eval_grid = [10000]
[network]
widths = [1, 50, 50, 1]
residual = true
[train]
generator = "equidistant"
m_r = 100
adam_epochs = 25000
batch_size = 0
[train.lbfgs]
max_iter = 2000
[loss]
lambda_b = [1.0]
"#,
    )?;
    let problem = cfg.problem()?;
    let sizes = cfg.sizes(&problem)?;
    let mut errs = Vec::new();
    for seed in 0..3 {
        let out = run::execute(&cfg, &sizes, seed)?;
        let e = out.metrics().errors.as_ref().map_or(f64::INFINITY, |e| e.l2);
        errs.push(e);
    }
    let best = errs.iter().copied().fold(f64::INFINITY, f64::min);
    let list: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    Ok(check(best <= TANH_L2_TOL, format!("best L2 {best:.2e} (seeds {})", list.join(", "))))
}

fn in_band(s: Option<f64>, band: (f64, f64)) -> bool {
    s.is_some_and(|s| band.0 <= s && s <= band.1)
}

fn slope_sweep(text: &str, metrics: [(&str, (f64, f64)); 2]) -> Result<Outcome> {
    let cfg = RunConfig::parse(text)?;
    let res = sweep::run_sweep_with(&cfg, 1, sweep::train_row)?;
    let failed = res.rows.iter().filter(|r| r.status != "ok").count();
    let mut pass = failed == 0;
    let mut parts = Vec::new();
    for (name, band) in metrics {
        let s = res.slope(name);
        pass &= in_band(s, band);
        parts.push(format!("{name} slope {} in [{}, {}]", s.map_or("n/a".into(), |s| format!("{s:.3}")), band.0, band.1));
    }
    let means: Vec<String> = res
        .means
        .iter()
        .map(|m| format!("{}:{:.2e}", m.m_r, m.l2.or(m.l2_l2).unwrap_or(f64::NAN)))
        .collect();
    Ok(check(pass, format!("{}; means {}; failed runs {failed}", parts.join(", "), means.join(" "))))
}

fn lipr_slope() -> Result<Outcome> {
    slope_sweep(
        r#"
[problem]
kind = "poisson_sin6pi"
eval_grid = [10000]
[network]
widths = [1, 50, 50, 1]
residual = true
wrapper = "poisson1d_dirichlet_zero"
[train]
generator = "equidistant"
adam_epochs = 5000
batch_size = 100
[loss]
schedule = "poisson_lipr"
[sweep]
ladder = [50, 160, 500, 1600, 5000]
repeats = 3
"#,
        [("l2", LIPR_L2_BAND), ("h1", LIPR_H1_BAND)],
    )
}

fn heat_slope() -> Result<Outcome> {
    if !full_budget() {
        return Ok(Outcome::Skip("set PINN_ACCEPTANCE_FULL=1 to run the sweep".into()));
    }
    slope_sweep(
        r#"
[problem]
kind = "heat_sin"
eval_grid = [400, 200]
[network]
widths = [2, 50, 50, 1]
[train]
generator = "iid_uniform"
adam_epochs = 10000
batch_size = 100
[loss]
schedule = "heat_lipr"
[sweep]
ladder = [5, 10, 20, 40, 80]
repeats = 3
"#,
        [("l2_l2", HEAT_L2_BAND), ("l2_h1", HEAT_H1_BAND)],
    )
}

fn lemma_slack() -> Result<Outcome> {
    let cfg = RunConfig::parse(
        r#"
[problem]
kind = "poisson_tanh"
[network]
widths = [1, 50, 50, 1]
residual = true
[train]
m_r = 100
[verify]
networks = 20
sampling_trials = 0
"#,
    )?;
    let r = verify::verify(&cfg)?;
    ensure!(r.bounds.len() == 20);
    Ok(check(r.min_slack >= -SLACK_TOL, format!("min slack {:.3e} over 20 networks", r.min_slack)))
}

fn sampling_probability() -> Result<Outcome> {
    let region = Region::Box(vec![Axis::Interval(0.0, 1.0)]);
    let r = analysis::sampling_probability_experiment(100, 2000, &region, 1.0, 0, 10_000)?;
    let p = r.empirical.unwrap_or(0.0);
    let ok = p >= SAMPLING_BOUND - SAMPLING_MARGIN && (r.bound - SAMPLING_BOUND).abs() < 1e-6;
    Ok(check(ok, format!("empirical {p:.4}, bound {:.6}", r.bound)))
}

fn schedule_law() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for (d, alpha) in [(1usize, 1.0), (2, 1.0), (2, 0.5)] {
        let k = DistributionConstants::new(1.0, 1.0, 1.0, 1.0, d, alpha)?;
        let groups = if d == 1 { 2 } else { 4 };
        let base = LossWeights::pinn(1.0, vec![1.0; groups]);
        let scaled: Vec<f64> = [100usize, 1000, 10_000]
            .iter()
            .map(|&m| {
                // One point per boundary group keeps the residual term of C_m dominant.
                let s = loss::holder_schedule(ScheduleKind::Theory, m, &vec![1; groups], Some(&k), &base)?;
                Ok(s.weights.reg_r * (m as f64).powf(0.5 + alpha / d as f64))
            })
            .collect::<Result<_>>()?;
        for v in &scaled {
            worst = worst.max((v - scaled[0]).abs() / scaled[0].abs());
        }
    }
    Ok(check(worst <= SCHEDULE_TOL, format!("max relative spread {worst:.1e}")))
}

fn optimizer_oracles() -> Result<Outcome> {
    let cfg = LbfgsConfig::default();
    let quad = |x: &[f64]| Ok((0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()));
    let (x, rq) = lbfgs_minimize(quad, vec![1.0, -2.0, 3.0, 0.5], &cfg)?;
    let fq = 0.5 * x.iter().map(|v| v * v).sum::<f64>();

    let rosen = |x: &[f64]| {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    };
    let capped = LbfgsConfig { max_iter: 100, ..cfg };
    let (x, rr) = lbfgs_minimize(rosen, vec![-1.2, 1.0], &capped)?;
    let fr = (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);

    let adam = AdamConfig::default();
    let mut state = AdamState::new(2, adam);
    let mut p = vec![0.3, -1.0];
    let g = [0.5, -2.0];
    adam_step(&mut state, &mut p, &g)?;
    // After one step m̂ = g and v̂ = g², so each update is -lr g / (|g| + eps).
    let adam_err = [0.3, -1.0]
        .iter()
        .zip(&g)
        .zip(&p)
        .map(|((p0, gi), pi)| (p0 - adam.lr * gi / (gi.abs() + adam.eps) - pi).abs())
        .fold(0.0, f64::max);

    let ok = fq <= QUADRATIC_TOL
        && rq.iterations <= 2
        && fr < ROSENBROCK_TOL
        && rr.iterations <= 100
        && adam_err <= ADAM_TOL;
    Ok(check(
        ok,
        format!(
            "quadratic {fq:.1e} in {} its, Rosenbrock {fr:.1e} in {} its, Adam step error {adam_err:.1e}",
            rq.iterations, rr.iterations
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("derivative oracle", derivative_oracle),
        ("manufactured identity", manufactured_identity),
        ("Poisson tanh PINN accuracy", tanh_case),
        ("LIPR convergence slope", lipr_slope),
        ("heat convergence slope", heat_slope),
        ("loss bound slack", lemma_slack),
        ("covering probability", sampling_probability),
        ("theory schedule law", schedule_law),
        ("optimizer oracles", optimizer_oracles),
    ];
    // Numeric arguments select criteria; libtest flags are ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome::Fail(format!("error: {e:#}")));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {tag}: {name} ({secs:.1}s) {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
