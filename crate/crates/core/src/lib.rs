//! Lifelong group classification over a stream of tasks: variational
//! representation learning with group-conditioned priors, a SOINN-selected
//! replay memory with KL anchoring, and the usual continual-learning
//! baselines, evaluated by average macro/micro F1.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod numkit;
pub mod rng;
pub mod runner;
pub mod soinn;

pub use error::{Error, Result};
