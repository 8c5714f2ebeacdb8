//! The regularized constrained dual function
//!
//! ```text
//! h_mu(lambda, x) = min_{y in Y} mu ||y||^2 + f(x,y) + lambda' g(x,y)
//! ```
//!
//! and its envelope gradients
//! `grad_x = grad_x f(x, y_bar) + lambda' jac_x g(x, y_bar)`,
//! `grad_lambda = g(x, y_bar)`, with `y_bar` the inner minimizer. For `mu > 0`
//! the minimizer is unique and these are true gradients; at `mu = 0` they are
//! one element of the subdifferential.

use serde::Serialize;

use crate::error::SolveError;
use crate::inner::{check_multipliers, minimize_block_lagrangian, InnerOptions, InnerStatus};
use crate::problem::{BilevelProblem, LowerBlock};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualEval {
    pub value: f64,
    pub minimizer: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_lambda: Vec<f64>,
    pub mu: f64,
    /// Per-block contributions to `value` and `grad_x` (they sum to the totals).
    pub block_values: Vec<f64>,
    pub block_grad_x: Vec<Vec<f64>>,
    pub status: InnerStatus,
}

impl DualEval {
    /// True when the gradients are only a subgradient choice (`mu == 0`).
    pub fn is_subgradient(&self) -> bool {
        self.mu == 0.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockDual {
    pub value: f64,
    pub y: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_lambda: Vec<f64>,
    pub status: InnerStatus,
}

pub(crate) fn eval_block(
    block: &LowerBlock,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    opts: &InnerOptions,
) -> Result<BlockDual, SolveError> {
    let m = minimize_block_lagrangian(block, x, lambda, mu, opts)?;
    let mut grad_x = block.objective.grad_x(x, &m.y);
    if !lambda.is_empty() {
        let jx = block.constraints.jac_x(x, &m.y);
        for (r, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                for c in 0..grad_x.len() {
                    grad_x[c] += l * jx[(r, c)];
                }
            }
        }
    }
    let grad_lambda = block.constraints.eval(x, &m.y);
    Ok(BlockDual {
        value: m.value,
        y: m.y,
        grad_x,
        grad_lambda,
        status: m.status,
    })
}

pub fn eval_rdf(p: &BilevelProblem, x: &[f64], lambda: &[f64], mu: f64) -> Result<DualEval, SolveError> {
    eval_rdf_with(p, x, lambda, mu, &InnerOptions::default())
}

pub fn eval_rdf_with(
    p: &BilevelProblem,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    opts: &InnerOptions,
) -> Result<DualEval, SolveError> {
    if x.len() != p.x_dim() {
        return Err(SolveError::InvalidArgument(format!(
            "x has {} entries, problem expects {}",
            x.len(),
            p.x_dim()
        )));
    }
    check_multipliers(p, lambda, mu)?;
    let mut out = DualEval {
        value: 0.0,
        minimizer: Vec::with_capacity(p.y_dim()),
        grad_x: vec![0.0; p.x_dim()],
        grad_lambda: Vec::with_capacity(p.constraint_count()),
        mu,
        block_values: Vec::with_capacity(p.block_count()),
        block_grad_x: Vec::with_capacity(p.block_count()),
        status: InnerStatus::Converged,
    };
    for (b, block) in p.blocks().iter().enumerate() {
        let d = eval_block(block, x, &lambda[p.block_constraint_range(b)], mu, opts)?;
        out.value += d.value;
        out.minimizer.extend_from_slice(&d.y);
        for (acc, v) in out.grad_x.iter_mut().zip(&d.grad_x) {
            *acc += v;
        }
        out.grad_lambda.extend_from_slice(&d.grad_lambda);
        out.block_values.push(d.value);
        out.block_grad_x.push(d.grad_x);
        if d.status != InnerStatus::Converged {
            out.status = d.status;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct AscentOptions {
    /// Stop when `||P(lambda + grad) - lambda||_inf <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub inner: InnerOptions,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 5000,
            inner: InnerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualMax {
    pub lambda: Vec<f64>,
    pub value: f64,
    /// Largest per-block projected-gradient norm at `lambda`.
    pub pg_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes `h_mu(., x)` over `lambda >= 0`, block by block (the dual function
/// is a sum of per-block terms in disjoint multipliers). On the iteration cap
/// or when no ascent is possible in floating point, the best iterate is returned
/// with `converged = false`.
pub fn maximize_dual(p: &BilevelProblem, x: &[f64], mu: f64, opts: &AscentOptions) -> Result<DualMax, SolveError> {
    if !(mu > 0.0) {
        return Err(SolveError::InvalidArgument(format!("maximize_dual needs mu > 0 (got {mu})")));
    }
    if !(opts.tol > 0.0) {
        return Err(SolveError::InvalidArgument("ascent tolerance must be positive".into()));
    }
    let mut out = DualMax {
        lambda: Vec::with_capacity(p.constraint_count()),
        value: 0.0,
        pg_norm: 0.0,
        iterations: 0,
        converged: true,
    };
    for block in p.blocks() {
        let r = maximize_block(block, x, mu, opts)?;
        out.lambda.extend(r.lambda);
        out.value += r.value;
        out.pg_norm = out.pg_norm.max(r.pg_norm);
        out.iterations += r.iterations;
        out.converged &= r.converged;
    }
    Ok(out)
}

fn projected_ascent_norm(lambda: &[f64], grad: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(grad)
        .map(|(&l, &g)| ((l + g).max(0.0) - l).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn maximize_block(block: &LowerBlock, x: &[f64], mu: f64, opts: &AscentOptions) -> Result<DualMax, SolveError> {
    let m = block.constraints.count();
    let mut lambda = vec![0.0; m];
    let mut cur = eval_block(block, x, &lambda, mu, &opts.inner)?;
    let mut pg = projected_ascent_norm(&lambda, &cur.grad_lambda);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = pg <= opts.tol;
    let mut trial = vec![0.0; m];

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut accepted = None;
        let mut s = step;
        for _ in 0..60 {
            for i in 0..m {
                trial[i] = (lambda[i] + s * cur.grad_lambda[i]).max(0.0);
            }
            let rise: f64 = (0..m).map(|i| cur.grad_lambda[i] * (trial[i] - lambda[i])).sum();
            if rise <= 0.0 {
                break;
            }
            let next = eval_block(block, x, &trial, mu, &opts.inner)?;
            if next.value >= cur.value + 1e-4 * rise {
                accepted = Some(next);
                break;
            }
            s *= 0.5;
        }
        let Some(next) = accepted else { break };

        // Barzilai-Borwein step for the next iteration; h is concave so
        // <d_lambda, d_grad> <= 0 whenever the step carries information.
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..m {
            let dl = trial[i] - lambda[i];
            ss += dl * dl;
            sy += dl * (next.grad_lambda[i] - cur.grad_lambda[i]);
        }
        step = if sy < 0.0 { (ss / -sy).clamp(1e-12, 1e12) } else { (2.0 * s).min(1e12) };

        lambda.copy_from_slice(&trial);
        cur = next;
        pg = projected_ascent_norm(&lambda, &cur.grad_lambda);
        converged = pg <= opts.tol;
    }

    Ok(DualMax {
        lambda,
        value: cur.value,
        pg_norm: pg,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{finite_diff_grad, grid_minimize, GridSpec};
    use crate::problem::{BoxSet, SmoothScalarFn, SmoothVectorFn};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn two_sided() -> BilevelProblem {
        BilevelProblem::new(
            SmoothScalarFn::new("F", 1, 1, |_, _| 0.0, |_, _| vec![0.0], |_, _| vec![0.0]),
            SmoothVectorFn::empty("G", 1, 0),
            SmoothScalarFn::new("f", 1, 1, |_, y| y[0], |_, _| vec![0.0], |_, _| vec![1.0]),
            SmoothVectorFn::new(
                "g",
                1,
                1,
                2,
                |_, y| vec![-y[0] - 1.0, y[0] - 1.0],
                |_, _| DMatrix::zeros(2, 1),
                |_, _| DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            ),
            BoxSet::uniform(1, -2.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    fn closed_form(l1: f64, l2: f64) -> f64 {
        -2.0 * (1.0 - l1 + l2).abs() - l1 - l2
    }

    #[test]
    fn golden_values_at_mu_zero() {
        let p = two_sided();
        for (l1, l2) in [(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (2.5, 0.25)] {
            let d = eval_rdf(&p, &[0.0], &[l1, l2], 0.0).unwrap();
            assert_abs_diff_eq!(d.value, closed_form(l1, l2), epsilon = 1e-12);
            assert!(d.is_subgradient());
        }
    }

    #[test]
    fn regularized_value_and_gradient() {
        let p = two_sided();
        let d = eval_rdf(&p, &[0.0], &[1.0, 0.0], 0.5).unwrap();
        let grid = GridSpec::line(-2.0, 2.0, 1e-4).unwrap();
        let (gy, gv) = grid_minimize(|y| 0.5 * y[0] * y[0] - 1.0, &grid);
        assert_abs_diff_eq!(d.minimizer[0], 0.0, epsilon = 1e-9);
        assert!((d.minimizer[0] - gy[0]).abs() <= 1e-4);
        assert_abs_diff_eq!(d.value, gv, epsilon = 1e-12);
        assert_eq!(d.grad_lambda, vec![-1.0, -1.0]);
        let recomputed = 0.5 * d.minimizer[0].powi(2) + d.minimizer[0] + (-d.minimizer[0] - 1.0);
        assert_abs_diff_eq!(d.value, recomputed, epsilon = 1e-10);
    }

    #[test]
    fn grad_lambda_matches_finite_differences() {
        let p = two_sided();
        let h = |l: &[f64]| eval_rdf(&p, &[0.0], l, 1e-4).unwrap().value;
        // on the boundary lambda2 = 0 only the first coordinate can be probed
        let d = eval_rdf(&p, &[0.0], &[0.5, 0.0], 1e-4).unwrap();
        let fd = finite_diff_grad(|v| h(&[v[0], 0.0]), &[0.5], 1e-6);
        assert!((d.grad_lambda[0] - fd[0]).abs() / fd[0].abs().max(1.0) <= 1e-4);
        let d = eval_rdf(&p, &[0.0], &[0.5, 0.3], 1e-4).unwrap();
        let fd = finite_diff_grad(h, &[0.5, 0.3], 1e-6);
        for (a, n) in d.grad_lambda.iter().zip(&fd) {
            assert!((a - n).abs() / n.abs().max(1.0) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn maximize_two_sided_example() {
        let p = two_sided();
        let r = maximize_dual(&p, &[0.0], 1e-8, &AscentOptions::default()).unwrap();
        assert!((r.lambda[0] - 1.0).abs() <= 1e-4 && r.lambda[1].abs() <= 1e-4, "{:?}", r.lambda);
        assert_abs_diff_eq!(r.value, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn inactive_constraints_give_zero_multipliers() {
        // (y - 0.3)^2 with y <= 0.8: unconstrained optimum is feasible
        let p = BilevelProblem::new(
            SmoothScalarFn::new("F", 1, 1, |_, _| 0.0, |_, _| vec![0.0], |_, _| vec![0.0]),
            SmoothVectorFn::empty("G", 1, 0),
            SmoothScalarFn::new(
                "f",
                1,
                1,
                |_, y| (y[0] - 0.3).powi(2),
                |_, _| vec![0.0],
                |_, y| vec![2.0 * (y[0] - 0.3)],
            ),
            SmoothVectorFn::new(
                "g",
                1,
                1,
                1,
                |_, y| vec![y[0] - 0.8],
                |_, _| DMatrix::zeros(1, 1),
                |_, _| DMatrix::from_element(1, 1, 1.0),
            ),
            BoxSet::uniform(1, -1.0, 1.0).unwrap(),
        )
        .unwrap();
        let r = maximize_dual(&p, &[0.0], 1e-6, &AscentOptions::default()).unwrap();
        assert_eq!(r.lambda, vec![0.0]);
        assert!(r.converged);
    }

    #[test]
    fn mu_must_be_positive_for_ascent() {
        assert!(maximize_dual(&two_sided(), &[0.0], 0.0, &AscentOptions::default()).is_err());
    }
}
