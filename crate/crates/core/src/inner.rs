//! Lower-level solves at a fixed upper-level decision `x`.
//!
//! [`solve_lower`] handles `min_y { f(x,y) | g(x,y) <= 0, y in Y }` with a
//! log-barrier over the inequality constraints and box projection onto `Y`.
//! Declared equality pairs are carried by an augmented-Lagrangian term inside
//! each barrier stage. Multipliers start from `t / (-g_i)`; when round-off in
//! the final (tiny) barrier weight leaves the stationarity residual above
//! tolerance they are re-fit by nonnegative least squares on the nearly
//! active constraints.
//!
//! [`solve_regularized_lagrangian`] minimizes `mu ||y||^2 + f + lambda' g` over
//! the box only, which is what the (regularized) constrained dual function
//! needs.
//!
//! Both exploit block separability: each lower-level block is solved on its own.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::SolveError;
use crate::problem::{BilevelProblem, LowerBlock};
use crate::qn::{minimize_box, projected_gradient_norm, QnOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

impl InnerOptions {
    fn validate(&self) -> Result<(), SolveError> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(SolveError::InvalidArgument(format!(
                "inner solver needs tol > 0 and max_iter >= 1 (got {}, {})",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStatus {
    Converged,
    MaxIter,
    Infeasible,
}

impl InnerStatus {
    /// The worse of two statuses.
    fn combine(self, other: Self) -> Self {
        use InnerStatus::*;
        match (self, other) {
            (Infeasible, _) | (_, Infeasible) => Infeasible,
            (MaxIter, _) | (_, MaxIter) => MaxIter,
            _ => Converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub y_star: Vec<f64>,
    /// `f(x, y_star)`
    pub value: f64,
    /// One per lower-level constraint component, all `>= 0`.
    pub multipliers: Vec<f64>,
    pub status: InnerStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Minimizer of the regularized Lagrangian over the box.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianMin {
    pub y: Vec<f64>,
    pub value: f64,
    pub status: InnerStatus,
    pub iterations: usize,
    /// Projected-gradient norm at `y`.
    pub residual: f64,
}

fn check_point(p: &BilevelProblem, x: &[f64]) -> Result<(), SolveError> {
    if x.len() != p.x_dim() {
        return Err(SolveError::InvalidArgument(format!(
            "x has {} entries, problem expects {}",
            x.len(),
            p.x_dim()
        )));
    }
    Ok(())
}

pub fn solve_lower(p: &BilevelProblem, x: &[f64], opts: &InnerOptions) -> Result<InnerSolution, SolveError> {
    check_point(p, x)?;
    opts.validate()?;
    let mut out = InnerSolution {
        y_star: Vec::with_capacity(p.y_dim()),
        value: 0.0,
        multipliers: Vec::with_capacity(p.constraint_count()),
        status: InnerStatus::Converged,
        iterations: 0,
        kkt_residual: 0.0,
    };
    for block in p.blocks() {
        let s = solve_lower_block(block, x, opts)?;
        out.y_star.extend(s.y_star);
        out.multipliers.extend(s.multipliers);
        out.value += s.value;
        out.status = out.status.combine(s.status);
        out.iterations += s.iterations;
        out.kkt_residual = out.kkt_residual.max(s.kkt_residual);
    }
    Ok(out)
}

/// `min_y { mu ||y||^2 + f(x,y) + lambda' g(x,y) | y in Y }`, the value of the
/// regularized constrained dual function at `(lambda, x)`.
pub fn solve_regularized_lagrangian(
    p: &BilevelProblem,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    opts: &InnerOptions,
) -> Result<LagrangianMin, SolveError> {
    check_point(p, x)?;
    opts.validate()?;
    check_multipliers(p, lambda, mu)?;
    let mut out = LagrangianMin {
        y: Vec::with_capacity(p.y_dim()),
        value: 0.0,
        status: InnerStatus::Converged,
        iterations: 0,
        residual: 0.0,
    };
    for (b, block) in p.blocks().iter().enumerate() {
        let s = minimize_block_lagrangian(block, x, &lambda[p.block_constraint_range(b)], mu, opts)?;
        out.y.extend(s.y);
        out.value += s.value;
        out.status = out.status.combine(s.status);
        out.iterations += s.iterations;
        out.residual = out.residual.max(s.residual);
    }
    Ok(out)
}

pub(crate) fn check_multipliers(p: &BilevelProblem, lambda: &[f64], mu: f64) -> Result<(), SolveError> {
    if lambda.len() != p.constraint_count() {
        return Err(SolveError::InvalidArgument(format!(
            "lambda has {} entries, problem has {} lower-level constraints",
            lambda.len(),
            p.constraint_count()
        )));
    }
    if lambda.iter().any(|&l| !(l >= 0.0)) {
        return Err(SolveError::InvalidArgument("multipliers must be nonnegative".into()));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(SolveError::InvalidArgument(format!("mu must be finite and >= 0 (got {mu})")));
    }
    Ok(())
}

/// Regularized Lagrangian of one block: value and `grad_y`.
pub(crate) fn block_lagrangian(
    block: &LowerBlock,
    x: &[f64],
    y: &[f64],
    lambda: &[f64],
    mu: f64,
    grad: &mut [f64],
) -> f64 {
    let f = block.objective.eval(x, y);
    let g = block.constraints.eval(x, y);
    let value = f + mu * y.iter().map(|v| v * v).sum::<f64>() + dot(lambda, &g);
    if !value.is_finite() {
        return f64::INFINITY;
    }
    let gf = block.objective.grad_y(x, y);
    for i in 0..y.len() {
        grad[i] = gf[i] + 2.0 * mu * y[i];
    }
    if !lambda.is_empty() {
        let jy = block.constraints.jac_y(x, y);
        for (r, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                for i in 0..y.len() {
                    grad[i] += l * jy[(r, i)];
                }
            }
        }
    }
    value
}

pub(crate) fn minimize_block_lagrangian(
    block: &LowerBlock,
    x: &[f64],
    lambda: &[f64],
    mu: f64,
    opts: &InnerOptions,
) -> Result<LagrangianMin, SolveError> {
    let qn = QnOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        ..QnOptions::default()
    };
    let r = minimize_box(
        |y, g| block_lagrangian(block, x, y, lambda, mu, g),
        &block.y_box.origin_projection(),
        block.y_box.lower(),
        block.y_box.upper(),
        &qn,
        None,
    )?;
    let status = if r.pg_norm <= opts.tol {
        InnerStatus::Converged
    } else {
        InnerStatus::MaxIter
    };
    // recompute so the value is exactly the objective at the returned point
    let mut scratch = vec![0.0; r.x.len()];
    let value = block_lagrangian(block, x, &r.x, lambda, mu, &mut scratch);
    Ok(LagrangianMin {
        y: r.x,
        value,
        status,
        iterations: r.iterations,
        residual: r.pg_norm,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const BARRIER_START: f64 = 1.0;
const BARRIER_SHRINK: f64 = 0.2;
const PHASE1_MAX_ITER: usize = 2000;
const PAIR_MAX_ROUNDS: usize = 30;

struct BlockSplit {
    /// Plain inequalities.
    ineq: Vec<usize>,
    /// `(i, j)` with `g_j = -g_i`; `g_i` is treated as an equality.
    pairs: Vec<(usize, usize)>,
}

fn split_constraints(block: &LowerBlock) -> BlockSplit {
    let pairs = block.constraints.equality_pairs().to_vec();
    let ineq = (0..block.constraints.count())
        .filter(|k| !pairs.iter().any(|&(i, j)| i == *k || j == *k))
        .collect();
    BlockSplit { ineq, pairs }
}

/// Rows kept by the barrier (`ineq`) and rows driven to zero by the
/// augmented-Lagrangian term (`eqs`).
struct StageRows<'a> {
    ineq: &'a [usize],
    eqs: &'a [usize],
}

struct BarrierResult {
    y: Vec<f64>,
    t: f64,
    iterations: usize,
}

/// Barrier continuation from a point strictly feasible for `rows.ineq`.
fn barrier_solve(
    block: &LowerBlock,
    x: &[f64],
    mut y: Vec<f64>,
    rows: &StageRows,
    opts: &InnerOptions,
) -> Result<BarrierResult, SolveError> {
    let lower = block.y_box.lower();
    let upper = block.y_box.upper();
    let mut iterations = 0;
    let mut t = BARRIER_START;
    let mut nu = vec![0.0; rows.eqs.len()];
    let mut rho = 10.0;
    let mut warm = None;
    loop {
        let stage_tol = opts.tol.max(0.1 * t);
        let qn = QnOptions {
            tol: stage_tol,
            max_iter: opts.max_iter,
            ..QnOptions::default()
        };
        let eq_target = t.max(0.1 * opts.tol);
        let mut prev_viol = f64::INFINITY;
        for _ in 0..PAIR_MAX_ROUNDS {
            let r = minimize_box(
                |yv, grad| barrier_objective(block, x, yv, t, rows, &nu, rho, grad),
                &y,
                lower,
                upper,
                &qn,
                warm.take(),
            )?;
            iterations += r.iterations;
            y = r.x;
            warm = Some(r.inverse_hessian);
            if rows.eqs.is_empty() {
                break;
            }
            let g = block.constraints.eval(x, &y);
            let mut viol: f64 = 0.0;
            for (k, &i) in rows.eqs.iter().enumerate() {
                nu[k] += rho * g[i];
                viol = viol.max(g[i].abs());
            }
            if viol <= eq_target {
                break;
            }
            if viol > 0.25 * prev_viol {
                rho *= 10.0;
                // penalty change invalidates the curvature model
                warm = None;
            }
            prev_viol = viol;
        }
        if t <= opts.tol / 10.0 {
            break;
        }
        t *= BARRIER_SHRINK;
    }
    Ok(BarrierResult { y, t, iterations })
}

/// Inequalities this close to zero are candidates for the active set.
const ACTIVE_GUESS: f64 = 1e-3;

fn solve_lower_block(block: &LowerBlock, x: &[f64], opts: &InnerOptions) -> Result<InnerSolution, SolveError> {
    let split = split_constraints(block);
    let m = block.constraints.count();
    let mut y = block.y_box.origin_projection();
    let mut iterations = 0;

    if !split.ineq.is_empty() {
        let (y1, it, max_g) = phase_one(block, x, &split.ineq, y);
        y = y1;
        iterations += it;
        if !(max_g < 0.0) {
            let value = block.objective.eval(x, &y);
            return Ok(InnerSolution {
                y_star: y,
                value,
                multipliers: vec![0.0; m],
                status: InnerStatus::Infeasible,
                iterations,
                kkt_residual: max_g,
            });
        }
    }
    if !block.objective.eval(x, &y).is_finite() {
        return Err(SolveError::NonFiniteStart);
    }

    let pair_rows: Vec<usize> = split.pairs.iter().map(|&(i, _)| i).collect();
    let b = barrier_solve(
        block,
        x,
        y,
        &StageRows {
            ineq: &split.ineq,
            eqs: &pair_rows,
        },
        opts,
    )?;
    iterations += b.iterations;
    let mut y = b.y;

    // barrier multipliers t / (-g_i); equality multipliers are re-fit below
    let g = block.constraints.eval(x, &y);
    let mut multipliers = vec![0.0; m];
    for &i in &split.ineq {
        multipliers[i] = b.t / (-g[i]);
    }
    let mut kkt = kkt_residual(block, x, &y, &multipliers);
    let near: Vec<usize> = split
        .ineq
        .iter()
        .copied()
        .filter(|&i| -g[i] <= (1e3 * b.t).max(1e-6))
        .collect();
    if let Some(refit) = refit_multipliers(block, x, &y, &near, &split.pairs) {
        let k2 = kkt_residual(block, x, &y, &refit);
        if k2 < kkt {
            kkt = k2;
            multipliers = refit;
        }
    }

    // Without strict complementarity the barrier path approaches the solution
    // only like sqrt(t); holding the nearly active rows at zero fixes that.
    let active: Vec<usize> = split.ineq.iter().copied().filter(|&i| -g[i] <= ACTIVE_GUESS).collect();
    if !active.is_empty() {
        let rest: Vec<usize> = split.ineq.iter().copied().filter(|i| !active.contains(i)).collect();
        let eqs: Vec<usize> = pair_rows.iter().chain(&active).copied().collect();
        let polished = barrier_solve(
            block,
            x,
            y.clone(),
            &StageRows {
                ineq: &rest,
                eqs: &eqs,
            },
            opts,
        )?;
        iterations += polished.iterations;
        if let Some(refit) = refit_multipliers(block, x, &polished.y, &active, &split.pairs) {
            let k2 = kkt_residual(block, x, &polished.y, &refit);
            let improves_value = block.objective.eval(x, &polished.y) <= block.objective.eval(x, &y) + opts.tol;
            if k2 < kkt && improves_value {
                kkt = k2;
                multipliers = refit;
                y = polished.y;
            }
        }
    }

    Ok(InnerSolution {
        value: block.objective.eval(x, &y),
        y_star: y,
        multipliers,
        status: if kkt <= opts.tol {
            InnerStatus::Converged
        } else {
            InnerStatus::MaxIter
        },
        iterations,
        kkt_residual: kkt,
    })
}

/// Projected subgradient descent on `max_i g_i(x, .)` over the box, with a
/// Polyak step aimed slightly below zero. Returns the point, the iteration
/// count and the final maximum.
fn phase_one(block: &LowerBlock, x: &[f64], ineq: &[usize], mut y: Vec<f64>) -> (Vec<f64>, usize, f64) {
    let margin = 1e-3;
    let max_over = |g: &[f64]| {
        ineq.iter()
            .map(|&i| (i, g[i]))
            .fold((ineq[0], f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    };
    let mut best = y.clone();
    let mut best_val = f64::INFINITY;
    for it in 0..PHASE1_MAX_ITER {
        let g = block.constraints.eval(x, &y);
        let (i, gmax) = max_over(&g);
        if gmax < best_val {
            best_val = gmax;
            best.clone_from(&y);
        }
        if gmax < 0.0 {
            return (y, it, gmax);
        }
        let jy = block.constraints.jac_y(x, &y);
        let row: Vec<f64> = jy.row(i).iter().copied().collect();
        let nrm2: f64 = row.iter().map(|v| v * v).sum();
        if nrm2 == 0.0 {
            break;
        }
        let step = (gmax + margin) / nrm2;
        for (yk, rk) in y.iter_mut().zip(&row) {
            *yk -= step * rk;
        }
        block.y_box.project(&mut y);
    }
    (best, PHASE1_MAX_ITER, best_val)
}

#[allow(clippy::too_many_arguments)]
fn barrier_objective(
    block: &LowerBlock,
    x: &[f64],
    y: &[f64],
    t: f64,
    rows: &StageRows,
    nu: &[f64],
    rho: f64,
    grad: &mut [f64],
) -> f64 {
    let g = block.constraints.eval(x, y);
    if rows.ineq.iter().any(|&i| !(g[i] < 0.0)) {
        return f64::INFINITY;
    }
    let f = block.objective.eval(x, y);
    if !f.is_finite() {
        return f64::INFINITY;
    }
    let mut value = f;
    let mut weights = vec![0.0; g.len()];
    for &i in rows.ineq {
        value -= t * (-g[i]).ln();
        weights[i] = t / (-g[i]);
    }
    for (k, &i) in rows.eqs.iter().enumerate() {
        value += nu[k] * g[i] + 0.5 * rho * g[i] * g[i];
        weights[i] = nu[k] + rho * g[i];
    }
    let gf = block.objective.grad_y(x, y);
    grad.copy_from_slice(&gf);
    if !g.is_empty() {
        let jy = block.constraints.jac_y(x, y);
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for c in 0..y.len() {
                    grad[c] += w * jy[(r, c)];
                }
            }
        }
    }
    value
}

/// max of box-projected stationarity, complementarity and primal violation.
pub(crate) fn kkt_residual(block: &LowerBlock, x: &[f64], y: &[f64], lambda: &[f64]) -> f64 {
    let mut grad = vec![0.0; y.len()];
    block_lagrangian(block, x, y, lambda, 0.0, &mut grad);
    let station = projected_gradient_norm(y, &grad, block.y_box.lower(), block.y_box.upper());
    let g = block.constraints.eval(x, y);
    let compl = g
        .iter()
        .zip(lambda)
        .map(|(gi, li)| (gi * li).abs())
        .fold(0.0, f64::max);
    let primal = g.iter().fold(0.0f64, |m, &gi| m.max(gi));
    station.max(compl).max(primal)
}

/// Nonnegative least-squares fit of `grad f + J' lambda = 0` over the free
/// coordinates, using the rows in `active` and both halves of every pair;
/// all other multipliers are zero.
fn refit_multipliers(
    block: &LowerBlock,
    x: &[f64],
    y: &[f64],
    active: &[usize],
    pairs: &[(usize, usize)],
) -> Option<Vec<f64>> {
    let mut cols = active.to_vec();
    for &(i, j) in pairs {
        cols.push(i);
        cols.push(j);
    }
    if cols.is_empty() {
        return None;
    }
    let lower = block.y_box.lower();
    let upper = block.y_box.upper();
    let free: Vec<usize> = (0..y.len()).filter(|&k| y[k] > lower[k] && y[k] < upper[k]).collect();
    if free.is_empty() {
        return None;
    }
    let gf = block.objective.grad_y(x, y);
    let jy = block.constraints.jac_y(x, y);
    let a = DMatrix::from_fn(free.len(), cols.len(), |r, c| jy[(cols[c], free[r])]);
    let b = DVector::from_fn(free.len(), |r, _| -gf[free[r]]);
    let sol = nnls(&a, &b);
    let mut lambda = vec![0.0; block.constraints.count()];
    for (c, &k) in cols.iter().enumerate() {
        lambda[k] = sol[c];
    }
    Some(lambda)
}

/// Lawson-Hanson active-set NNLS: `min ||A z - b|| s.t. z >= 0`.
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut z = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + a.amax() * b.amax());
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(idx.len()));
        let mut full = DVector::zeros(n);
        for (c, &j) in idx.iter().enumerate() {
            full[j] = sol[c];
        }
        full
    };

    for _ in 0..3 * n + 3 {
        let w = a.transpose() * (b - a * &z);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;
        loop {
            let s = solve_passive(&passive);
            if (0..n).filter(|&k| passive[k]).all(|k| s[k] > 0.0) {
                z = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for k in (0..n).filter(|&k| passive[k] && s[k] <= 0.0) {
                alpha = alpha.min(z[k] / (z[k] - s[k]));
            }
            z += (s - &z) * alpha;
            for k in 0..n {
                if passive[k] && z[k] <= 1e-15 {
                    passive[k] = false;
                    z[k] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{grid_minimize, GridSpec};
    use crate::problem::{BoxSet, SmoothScalarFn, SmoothVectorFn};
    use approx::assert_abs_diff_eq;

    fn single(
        f: SmoothScalarFn,
        g: SmoothVectorFn,
        y_box: BoxSet,
    ) -> BilevelProblem {
        let ny = y_box.dim();
        let nx = f.x_dim();
        BilevelProblem::new(
            SmoothScalarFn::new("F", nx, ny, |_, _| 0.0, move |_, _| vec![0.0; nx], move |_, _| vec![0.0; ny]),
            SmoothVectorFn::empty("G", nx, 0),
            f,
            g,
            y_box,
        )
        .unwrap()
    }

    fn interval_constraints() -> SmoothVectorFn {
        SmoothVectorFn::new(
            "g",
            1,
            1,
            2,
            |_, y| vec![-y[0] - 1.0, y[0] - 1.0],
            |_, _| DMatrix::zeros(2, 1),
            |_, _| DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
        )
    }

    fn two_sided_example() -> BilevelProblem {
        single(
            SmoothScalarFn::new("f", 1, 1, |_, y| y[0], |_, _| vec![0.0], |_, _| vec![1.0]),
            interval_constraints(),
            BoxSet::uniform(1, -2.0, 2.0).unwrap(),
        )
    }

    fn qp_example() -> BilevelProblem {
        single(
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
                |_, y| vec![y[0] - 0.2],
                |_, _| DMatrix::zeros(1, 1),
                |_, _| DMatrix::from_element(1, 1, 1.0),
            ),
            BoxSet::uniform(1, -1.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn linear_objective_attains_endpoint() {
        // f = (x + u) y with x + u = 0.5
        let p = single(
            SmoothScalarFn::new("f", 1, 1, |x, y| x[0] * y[0], |_, y| vec![y[0]], |x, _| vec![x[0]]),
            interval_constraints(),
            BoxSet::uniform(1, -2.0, 2.0).unwrap(),
        );
        let s = solve_lower(&p, &[0.5], &InnerOptions::default()).unwrap();
        assert_eq!(s.status, InnerStatus::Converged);
        assert_abs_diff_eq!(s.y_star[0], -1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.value, -0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(s.multipliers[0], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn two_sided_example_multipliers() {
        let s = solve_lower(&two_sided_example(), &[0.0], &InnerOptions::default()).unwrap();
        assert_eq!(s.status, InnerStatus::Converged, "kkt {}", s.kkt_residual);
        assert_abs_diff_eq!(s.y_star[0], -1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.value, -1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.multipliers[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.multipliers[1], 0.0, epsilon = 1e-6);
        assert!(s.kkt_residual <= 1e-8);
    }

    #[test]
    fn strictly_convex_qp_matches_grid() {
        let s = solve_lower(&qp_example(), &[0.0], &InnerOptions::default()).unwrap();
        assert_eq!(s.status, InnerStatus::Converged);
        let grid = GridSpec::line(-1.0, 0.2, 1e-4).unwrap();
        let (gy, gv) = grid_minimize(|y| (y[0] - 0.3).powi(2), &grid);
        assert!((s.y_star[0] - gy[0]).abs() <= 1e-4);
        assert!((s.value - gv).abs() <= 1e-6);
        assert_abs_diff_eq!(s.y_star[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(s.multipliers[0], 0.2, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_lower_level_is_reported() {
        // y >= 3 cannot hold inside Y = [-2, 2]
        let p = single(
            SmoothScalarFn::new("f", 1, 1, |_, y| y[0], |_, _| vec![0.0], |_, _| vec![1.0]),
            SmoothVectorFn::new(
                "g",
                1,
                1,
                1,
                |_, y| vec![3.0 - y[0]],
                |_, _| DMatrix::zeros(1, 1),
                |_, _| DMatrix::from_element(1, 1, -1.0),
            ),
            BoxSet::uniform(1, -2.0, 2.0).unwrap(),
        );
        let s = solve_lower(&p, &[0.0], &InnerOptions::default()).unwrap();
        assert_eq!(s.status, InnerStatus::Infeasible);
        assert!(s.kkt_residual > 0.0);
    }

    #[test]
    fn equality_pair_is_respected() {
        // min y1^2 + 2 y2^2 s.t. y1 + y2 = 1, y >= 0  ->  y = (2/3, 1/3)
        let g = SmoothVectorFn::new(
            "g",
            1,
            2,
            4,
            |_, y| vec![-y[0], -y[1], y[0] + y[1] - 1.0, 1.0 - y[0] - y[1]],
            |_, _| DMatrix::zeros(4, 1),
            |_, _| DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0, -1.0, -1.0]),
        )
        .with_equality_pair(2, 3)
        .unwrap();
        let p = single(
            SmoothScalarFn::new(
                "f",
                1,
                2,
                |_, y| y[0] * y[0] + 2.0 * y[1] * y[1],
                |_, _| vec![0.0],
                |_, y| vec![2.0 * y[0], 4.0 * y[1]],
            ),
            g,
            BoxSet::uniform(2, -1.0, 2.0).unwrap(),
        );
        let s = solve_lower(&p, &[0.0], &InnerOptions::default()).unwrap();
        assert_eq!(s.status, InnerStatus::Converged, "kkt {}", s.kkt_residual);
        assert_abs_diff_eq!(s.y_star[0], 2.0 / 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.y_star[1], 1.0 / 3.0, epsilon = 1e-7);
        // equality multiplier nu = -4/3: carried by the "<=" side's mirror
        assert_abs_diff_eq!(s.multipliers[3] - s.multipliers[2], 4.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn regularized_lagrangian_examples() {
        let p = two_sided_example();
        let opts = InnerOptions::default();
        let r = solve_regularized_lagrangian(&p, &[0.0], &[1.0, 0.0], 0.0, &opts).unwrap();
        assert_abs_diff_eq!(r.value, -1.0, epsilon = 1e-12);
        let r = solve_regularized_lagrangian(&p, &[0.0], &[0.0, 0.0], 0.0, &opts).unwrap();
        assert_eq!(r.y, vec![-2.0]);
        assert_abs_diff_eq!(r.value, -2.0, epsilon = 1e-12);

        let sq = single(
            SmoothScalarFn::new("f", 1, 1, |_, y| y[0] * y[0], |_, _| vec![0.0], |_, y| vec![2.0 * y[0]]),
            SmoothVectorFn::new(
                "g",
                1,
                1,
                1,
                |_, y| vec![y[0] - 1.0],
                |_, _| DMatrix::zeros(1, 1),
                |_, _| DMatrix::from_element(1, 1, 1.0),
            ),
            BoxSet::uniform(1, -1.0, 1.0).unwrap(),
        );
        let r = solve_regularized_lagrangian(&sq, &[0.0], &[0.0], 1.0, &opts).unwrap();
        assert_abs_diff_eq!(r.y[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_multipliers_rejected() {
        let p = two_sided_example();
        let e = solve_regularized_lagrangian(&p, &[0.0], &[-1.0, 0.0], 0.0, &InnerOptions::default());
        assert!(matches!(e, Err(SolveError::InvalidArgument(_))));
        let e = solve_regularized_lagrangian(&p, &[0.0], &[1.0], 0.0, &InnerOptions::default());
        assert!(e.is_err());
    }

    #[test]
    fn nnls_small_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let z = nnls(&a, &DVector::from_vec(vec![2.0, -3.0]));
        assert_abs_diff_eq!(z[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-12);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let z = nnls(&a, &DVector::from_vec(vec![-0.5]));
        assert_abs_diff_eq!(z[0] - z[1], -0.5, epsilon = 1e-12);
    }
}
