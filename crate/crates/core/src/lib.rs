//! Physics-informed neural network training with exact input derivatives up to
//! third order, Lipschitz-regularized losses, Adam and L-BFGS, and numerical
//! checks of the covering-based generalization bounds.

pub mod analysis;
pub mod error;
pub mod jets;
pub mod network;

pub use error::{Error, Result};
pub use jets::{Jet3, ParamTape};
pub use network::{Architecture, Network, Wrapper};
pub mod expr;
pub mod loss;
pub mod pde;
pub mod sampling;
pub mod optim;
