use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pinn_cli::{cmd_gradcheck, cmd_sweep, cmd_train, cmd_verify, RunConfig};

#[derive(Parser)]
#[command(name = "pinn", version, about = "Train and verify physics-informed neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `[sweep] workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and evaluate it.
    Train,
    /// Train over the configured ladder of sample counts.
    Sweep,
    /// Check the covering loss bound and the sampling probability.
    Verify,
    /// Compare derivatives and loss gradients with finite differences.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config <path> is required"))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let out = cfg.out.clone();
    match cli.command {
        Command::Train => {
            let run = cmd_train(&cfg, &out)?;
            let m = run.metrics();
            println!("final loss {:e}", m.final_loss);
            if let Some(e) = &m.errors {
                println!("l2 {:e}  h1 {:e}", e.l2, e.h1);
                if let (Some(a), Some(b)) = (e.l2_l2, e.l2_h1) {
                    println!("l2_l2 {a:e}  l2_h1 {b:e}");
                }
            }
        }
        Command::Sweep => {
            let workers = cli.workers.unwrap_or(cfg.sweep.workers);
            let res = cmd_sweep(&cfg, &out, workers)?;
            for (metric, fit) in &res.slopes {
                println!("{metric} slope {:.4}", fit.slope);
            }
            let failed = res.rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                println!("{failed} run(s) failed; see sweep.csv");
            }
        }
        Command::Verify => {
            let r = cmd_verify(&cfg, &out)?;
            println!("min slack {:e} over {} networks", r.min_slack, r.bounds.len());
            match r.sampling.empirical {
                Some(p) => println!("covering probability {p} (bound {})", r.sampling.bound),
                None => println!("covering bound {} (no trials)", r.sampling.bound),
            }
        }
        Command::Gradcheck => {
            let r = cmd_gradcheck(&cfg, &out)?;
            for c in &r.channels {
                println!("{:<10} {:e} (tol {:e})", c.channel, c.max_rel_error, c.tol);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
