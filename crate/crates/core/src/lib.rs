//! Generalized Langevin samplers with a rate-function lab, Lyapunov drift
//! checks and a Bayesian logistic regression harness.

pub mod blr;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fd;
pub mod lyapunov;
pub mod potentials;
pub mod ratelab;
pub mod samplers;

pub use error::{Error, Result};
