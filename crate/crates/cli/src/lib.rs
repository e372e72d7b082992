//! Command-line driver: run configuration, training runs, convergence
//! sweeps, bound verification and gradient checks.

pub mod config;
pub mod run;
pub mod sweep;
pub mod verify;

pub use config::RunConfig;
pub use run::{cmd_train, RunOutput};
pub use sweep::{cmd_sweep, SweepResult};
pub use verify::{cmd_gradcheck, cmd_verify};
