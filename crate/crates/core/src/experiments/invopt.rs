//! Inverse optimization with noisy data.
//!
//! Agents respond to a signal `u_i` with `y_i in argmin { (theta + u_i) y | y in [-1, 1] }`
//! and we observe `z_i = y_i + w_i`, `w_i ~ N(0, 1)`. Estimating `theta` by least
//! squares over the agents' responses is a bilevel program with `n` independent
//! followers sharing the leader variable `x = theta`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::homotopy::{run, DriverConfig, DriverOptions, Schedule};
use crate::problem::{BilevelProblem, BoxSet, LowerBlock, SmoothScalarFn, SmoothVectorFn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvOptInstance {
    pub n: usize,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    /// Ground truth, kept for evaluation only.
    pub theta0: f64,
}

/// `argmin { c y | y in [-1, 1] }`; at `c = 0` every point is optimal and -1 is returned.
pub fn best_response(c: f64) -> f64 {
    if c < 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Draws `theta0`, then `u_1..u_n`, then the noise, all from one ChaCha8 stream.
pub fn gen_invopt(n: usize, seed: u64) -> Result<InvOptInstance, ExperimentError> {
    generate(n, seed, true)
}

/// Same draws as [`gen_invopt`] with `z_i` equal to the exact responses.
pub fn gen_invopt_noiseless(n: usize, seed: u64) -> Result<InvOptInstance, ExperimentError> {
    generate(n, seed, false)
}

fn generate(n: usize, seed: u64, noisy: bool) -> Result<InvOptInstance, ExperimentError> {
    if n == 0 {
        return Err(ExperimentError::InvalidInstance("need at least one data point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta0: f64 = rng.random_range(-1.0..=1.0);
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let z = u
        .iter()
        .map(|&ui| {
            let w: f64 = rng.sample(StandardNormal);
            best_response(theta0 + ui) + if noisy { w } else { 0.0 }
        })
        .collect();
    Ok(InvOptInstance { n, u, z, theta0 })
}

/// Random start in `[-1, 1]`, drawn from a separate stream of the same seed so
/// it does not depend on `n`.
pub fn random_start(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng.random_range(-1.0..=1.0)
}

pub fn build_invopt_blp(inst: &InvOptInstance) -> Result<BilevelProblem, ExperimentError> {
    if inst.u.len() != inst.n || inst.z.len() != inst.n || inst.n == 0 {
        return Err(ExperimentError::InvalidInstance(format!(
            "n = {} but {} signals and {} observations",
            inst.n,
            inst.u.len(),
            inst.z.len()
        )));
    }
    if inst.u.iter().any(|u| !(u.abs() <= 1.0)) || inst.z.iter().any(|z| !z.is_finite()) {
        return Err(ExperimentError::InvalidInstance("signals must lie in [-1, 1], observations must be finite".into()));
    }
    let n = inst.n;
    let z = inst.z.clone();
    let zg = inst.z.clone();
    let scale = 1.0 / n as f64;
    let upper = SmoothScalarFn::new(
        "squared_loss",
        1,
        n,
        move |_, y| scale * y.iter().zip(&z).map(|(yi, zi)| (zi - yi).powi(2)).sum::<f64>(),
        |_, _| vec![0.0],
        move |_, y| y.iter().zip(&zg).map(|(yi, zi)| -2.0 * scale * (zi - yi)).collect(),
    );
    let blocks = inst
        .u
        .iter()
        .map(|&ui| {
            let f = SmoothScalarFn::new(
                "bilinear_cost",
                1,
                1,
                move |x, y| (x[0] + ui) * y[0],
                |_, y| vec![y[0]],
                move |x, _| vec![x[0] + ui],
            );
            let g = SmoothVectorFn::new(
                "unit_interval",
                1,
                1,
                2,
                |_, y| vec![-y[0] - 1.0, y[0] - 1.0],
                |_, _| DMatrix::zeros(2, 1),
                |_, _| DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            );
            Ok(LowerBlock::new(f, g, BoxSet::uniform(1, -2.0, 2.0)?))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let p = BilevelProblem::with_blocks(upper, SmoothVectorFn::empty("no_upper_constraints", 1, 0), blocks)?
        .with_x_box(BoxSet::uniform(1, -1.0, 1.0)?)?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvOptRow {
    pub instance_id: usize,
    pub seed: u64,
    pub theta0: f64,
    pub x0: f64,
    pub theta_hat: f64,
    pub mse_init: f64,
    pub mse_final: f64,
    pub wall_ms: f64,
    pub status: String,
}

/// Generates instance `seed`, solves it from [`random_start`] and scores both
/// the start and the estimate against the ground truth. Solver failures are
/// reported in `status` (the estimate is then NaN).
pub fn run_invopt_instance(
    instance_id: usize,
    seed: u64,
    n: usize,
    noiseless: bool,
    schedule: &Schedule,
    opts: &DriverOptions,
) -> InvOptRow {
    let clock = Instant::now();
    let x0 = random_start(seed);
    let outcome = (|| -> Result<(InvOptInstance, f64, String), ExperimentError> {
        let inst = if noiseless {
            gen_invopt_noiseless(n, seed)?
        } else {
            gen_invopt(n, seed)?
        };
        let p = build_invopt_blp(&inst)?;
        let (x, report) = run(&p, &DriverConfig::new(vec![x0], *schedule), opts)?;
        let status = if report.warnings.is_empty() {
            "ok".to_string()
        } else {
            format!("ok_with_warnings:{}", report.warnings.len())
        };
        Ok((inst, x[0], status))
    })();
    let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok((inst, theta_hat, status)) => InvOptRow {
            instance_id,
            seed,
            theta0: inst.theta0,
            x0,
            theta_hat,
            mse_init: (x0 - inst.theta0).powi(2),
            mse_final: (theta_hat - inst.theta0).powi(2),
            wall_ms,
            status,
        },
        Err(err) => {
            let theta0 = gen_invopt(n.max(1), seed).map(|i| i.theta0).unwrap_or(f64::NAN);
            InvOptRow {
                instance_id,
                seed,
                theta0,
                x0,
                theta_hat: f64::NAN,
                mse_init: (x0 - theta0).powi(2),
                mse_final: f64::NAN,
                wall_ms,
                status: format!("error: {err}"),
            }
        }
    }
}
