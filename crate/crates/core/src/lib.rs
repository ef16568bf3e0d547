//! Information budgets for answer/abstain decisions, permutation-mixture
//! gating, and diagnostics for order sensitivity of sequence predictors.

pub mod analysis;
pub mod backend;
pub mod cli;
pub mod config;
pub mod dist;
pub mod dose;
pub mod error;
pub mod gate;
pub mod info;
pub mod permute;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{BackendError, Error, Result};
