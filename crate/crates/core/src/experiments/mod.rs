//! The two worked applications: estimating a utility parameter from noisy
//! decisions, and a leader's strategy in a two-edge routing game.

pub mod invopt;
pub mod result;
pub mod routing;

use thiserror::Error;

use crate::error::{ModelError, SolveError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

use crate::homotopy::{DriverOptions, Schedule};
use crate::sweep::run_indexed;
use invopt::{run_invopt_instance, InvOptRow};
use routing::{run_stackelberg_cell, StackelbergRow};

/// `{0.1, 0.2, ..., 0.9}`, computed as `i / 10` so every value is the nearest double.
pub fn tenths() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Instance `i` uses seed `seed + i`; rows come back in instance order.
pub fn invopt_sweep(
    count: usize,
    seed: u64,
    n: usize,
    noiseless: bool,
    schedule: &Schedule,
    opts: &DriverOptions,
    jobs: usize,
) -> Vec<InvOptRow> {
    run_indexed(count, jobs, |i| {
        run_invopt_instance(i, seed.wrapping_add(i as u64), n, noiseless, schedule, opts)
    })
}

/// One row per `(alpha, phi)`, alpha-major.
pub fn stackelberg_grid(
    alphas: &[f64],
    phis: &[f64],
    schedule: &Schedule,
    opts: &DriverOptions,
    jobs: usize,
) -> Vec<StackelbergRow> {
    run_indexed(alphas.len() * phis.len(), jobs, |i| {
        run_stackelberg_cell(alphas[i / phis.len()], phis[i % phis.len()], schedule, opts)
    })
}
