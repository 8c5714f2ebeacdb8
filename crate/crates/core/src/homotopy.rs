//! Outer continuation loop: solve the lower level at the current `x`, use its
//! primal-dual solution as a feasible start for the reformulation at the
//! current `(eps, mu)`, then shrink `(eps, mu) <- (gamma eps, zeta mu)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dbp::{residuals_with, solve_dbp, DbpOptions, DbpPoint, DbpStatus, FeasibilityTolerance};
use crate::dual::{maximize_dual, AscentOptions};
use crate::error::SolveError;
use crate::inner::{solve_lower, InnerOptions, InnerStatus};
use crate::problem::BilevelProblem;

/// Continuation parameters without the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epsilon0: f64,
    pub mu0: f64,
    pub gamma: f64,
    pub zeta: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Default for Schedule {
    /// `eps0 = 1, mu0 = 1e-4, gamma = 0.1, zeta = 1, K = 3`
    fn default() -> Self {
        Self {
            epsilon0: 1.0,
            mu0: 1e-4,
            gamma: 0.1,
            zeta: 1.0,
            k: 3,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |msg: String| Err(SolveError::InvalidArgument(msg));
        if !(self.epsilon0 > 0.0 && self.epsilon0.is_finite()) {
            return bad(format!("epsilon0 must be positive (got {})", self.epsilon0));
        }
        // mu = 0 would make the dual function nondifferentiable inside the solver
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return bad(format!("mu0 must be positive (got {})", self.mu0));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1) (got {})", self.gamma));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return bad(format!("zeta must lie in (0, 1] (got {})", self.zeta));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        Ok(())
    }

    /// `(eps_k, mu_k)` for `k = 0..K`, by repeated multiplication.
    pub fn tolerances(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.k);
        let (mut eps, mut mu) = (self.epsilon0, self.mu0);
        for _ in 0..self.k {
            out.push((eps, mu));
            eps *= self.gamma;
            mu *= self.zeta;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub x0: Vec<f64>,
    #[serde(flatten)]
    pub schedule: Schedule,
}

impl DriverConfig {
    pub fn new(x0: Vec<f64>, schedule: Schedule) -> Self {
        Self { x0, schedule }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DriverOptions {
    pub inner: InnerOptions,
    pub dbp: DbpOptions,
    pub ascent: AscentOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub epsilon: f64,
    pub mu: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `F` at the start point `(x_k, y_k)` and at the returned point.
    pub start_objective: f64,
    pub objective: f64,
    pub max_residual: f64,
    pub lower_iterations: usize,
    pub dbp_major_iterations: usize,
    pub dbp_inner_iterations: usize,
    pub dbp_status: Option<DbpStatus>,
    /// The start violated the gap constraint and its multipliers were replaced
    /// by a dual maximizer.
    pub restored: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

/// Runs the continuation loop for `K` steps and returns the final `x`.
pub fn run(
    p: &BilevelProblem,
    cfg: &DriverConfig,
    opts: &DriverOptions,
) -> Result<(Vec<f64>, SolveReport), SolveError> {
    cfg.schedule.validate()?;
    if cfg.x0.len() != p.x_dim() {
        return Err(SolveError::InvalidArgument(format!(
            "x0 has {} entries, problem expects {}",
            cfg.x0.len(),
            p.x_dim()
        )));
    }
    let upper_violation = p.upper_violation(&cfg.x0);
    if upper_violation > opts.dbp.constraint_tol {
        return Err(SolveError::InvalidArgument(format!(
            "x0 violates the upper-level constraints by {upper_violation:.3e}"
        )));
    }

    let mut x = cfg.x0.clone();
    let mut report = SolveReport::default();
    for (k, (eps, mu)) in cfg.schedule.tolerances().into_iter().enumerate() {
        let clock = Instant::now();
        let tol = FeasibilityTolerance::new(eps, mu)?;

        let lower = solve_lower(p, &x, &opts.inner)?;
        match lower.status {
            InnerStatus::Infeasible => {
                return Err(SolveError::Infeasible {
                    max_violation: lower.kkt_residual,
                })
            }
            InnerStatus::MaxIter => report.warnings.push(format!(
                "step {k}: lower level stopped with KKT residual {:.3e}",
                lower.kkt_residual
            )),
            InnerStatus::Converged => {}
        }

        let mut start = DbpPoint::new(p, x.clone(), lower.y_star.clone(), lower.multipliers.clone())?;
        let mut restored = false;
        let start_res = residuals_with(p, &start, tol, &opts.inner)?;
        if !start_res.is_feasible(opts.dbp.constraint_tol) {
            let dual = maximize_dual(p, &x, mu, &opts.ascent)?;
            start.lambda = dual.lambda;
            restored = true;
        }
        let start_objective = p.upper_objective().eval(&start.x, &start.y);

        let record = match solve_dbp(p, &start, tol, &opts.dbp) {
            Ok((pt, dbp)) => {
                let res = residuals_with(p, &pt, tol, &opts.inner)?;
                x.clone_from(&pt.x);
                IterationRecord {
                    k,
                    epsilon: eps,
                    mu,
                    x: pt.x,
                    y: pt.y,
                    lambda: pt.lambda,
                    start_objective,
                    objective: dbp.objective,
                    max_residual: res.max_violation(),
                    lower_iterations: lower.iterations,
                    dbp_major_iterations: dbp.major_iterations,
                    dbp_inner_iterations: dbp.inner_iterations,
                    dbp_status: Some(dbp.status),
                    restored,
                    wall_ms: 0.0,
                }
            }
            Err(err) => {
                report
                    .warnings
                    .push(format!("step {k}: reformulation failed ({err}); keeping previous x"));
                let res = residuals_with(p, &start, tol, &opts.inner)?;
                IterationRecord {
                    k,
                    epsilon: eps,
                    mu,
                    x: start.x,
                    y: start.y,
                    lambda: start.lambda,
                    start_objective,
                    objective: start_objective,
                    max_residual: res.max_violation(),
                    lower_iterations: lower.iterations,
                    dbp_major_iterations: 0,
                    dbp_inner_iterations: 0,
                    dbp_status: None,
                    restored,
                    wall_ms: 0.0,
                }
            }
        };
        if record.objective > record.start_objective {
            report.warnings.push(format!(
                "step {k}: objective rose from {:.6e} to {:.6e}",
                record.start_objective, record.objective
            ));
        }
        report.iterations.push(IterationRecord {
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            ..record
        });
    }
    Ok((x, report))
}
