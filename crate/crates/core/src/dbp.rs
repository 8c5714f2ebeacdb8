//! Single-level reformulation of the bilevel program.
//!
//! ```text
//! min_{x,y,lambda}  F(x,y)
//! s.t.  G(x) <= 0,  g(x,y) <= eps,  lambda >= 0,
//!       f_b(x,y_b) - h_mu,b(lambda_b, x) <= eps     for every lower-level block b
//! ```
//!
//! Weak duality makes `f - h_mu >= -mu ||y||^2`-ish small, so the last row
//! forces `y` to be an `eps`-solution of the lower level. The gap constraint is
//! differentiated with the envelope formulas of the dual function, so no nested
//! differentiation is required.
//!
//! The problem is solved with a PHR augmented Lagrangian over the inequality
//! rows; the bound constraints (`x` box, `y` box, `lambda >= 0`) are kept by
//! projection inside a box-constrained quasi-Newton inner loop. The merit is a
//! sum of per-block terms sharing only `x` (and `y` through `F`), which the
//! partitioned quasi-Newton solver exploits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dual::{eval_block, eval_rdf_with};
use crate::error::SolveError;
use crate::inner::InnerOptions;
use crate::problem::BilevelProblem;
use crate::pqn::{minimize_partitioned, minimize_partitioned_newton};
use crate::qn::{minimize_box, projected_gradient_norm, QnOptions, QnStatus};

/// The `(eps, mu)` pair that parameterizes the feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityTolerance {
    pub epsilon: f64,
    pub mu: f64,
}

impl FeasibilityTolerance {
    pub fn new(epsilon: f64, mu: f64) -> Result<Self, SolveError> {
        if !(epsilon >= 0.0 && epsilon.is_finite() && mu >= 0.0 && mu.is_finite()) {
            return Err(SolveError::InvalidArgument(format!(
                "tolerances must be finite and nonnegative (eps {epsilon}, mu {mu})"
            )));
        }
        Ok(Self { epsilon, mu })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbpPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl DbpPoint {
    pub fn new(p: &BilevelProblem, x: Vec<f64>, y: Vec<f64>, lambda: Vec<f64>) -> Result<Self, SolveError> {
        let pt = Self { x, y, lambda };
        pt.check(p)?;
        Ok(pt)
    }

    fn check(&self, p: &BilevelProblem) -> Result<(), SolveError> {
        if self.x.len() != p.x_dim() || self.y.len() != p.y_dim() || self.lambda.len() != p.constraint_count() {
            return Err(SolveError::InvalidArgument(format!(
                "point dimensions ({}, {}, {}) do not match problem ({}, {}, {})",
                self.x.len(),
                self.y.len(),
                self.lambda.len(),
                p.x_dim(),
                p.y_dim(),
                p.constraint_count()
            )));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(SolveError::InvalidArgument("multipliers must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Every component is `<= 0` exactly on the feasible set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintResiduals {
    /// `G(x)`
    pub upper: Vec<f64>,
    /// `g(x,y) - eps`
    pub lower_feas: Vec<f64>,
    /// `f_b(x,y_b) - h_mu,b(lambda_b,x) - eps`, one entry per lower-level block.
    pub duality_gap: Vec<f64>,
    /// `-lambda`
    pub lambda_neg: Vec<f64>,
}

impl ConstraintResiduals {
    /// Largest component, or `-inf` when there are none.
    pub fn max_residual(&self) -> f64 {
        self.upper
            .iter()
            .chain(&self.lower_feas)
            .chain(&self.duality_gap)
            .chain(&self.lambda_neg)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// `max(0, max_residual)`
    pub fn max_violation(&self) -> f64 {
        self.max_residual().max(0.0)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_residual() <= tol
    }
}

pub fn residuals(p: &BilevelProblem, pt: &DbpPoint, tol: FeasibilityTolerance) -> Result<ConstraintResiduals, SolveError> {
    residuals_with(p, pt, tol, &InnerOptions::default())
}

pub fn residuals_with(
    p: &BilevelProblem,
    pt: &DbpPoint,
    tol: FeasibilityTolerance,
    inner: &InnerOptions,
) -> Result<ConstraintResiduals, SolveError> {
    pt.check(p)?;
    let dual = eval_rdf_with(p, &pt.x, &pt.lambda, tol.mu, inner)?;
    let duality_gap = (0..p.block_count())
        .map(|b| {
            let yb = &pt.y[p.block_y_range(b)];
            p.blocks()[b].objective.eval(&pt.x, yb) - dual.block_values[b] - tol.epsilon
        })
        .collect();
    Ok(ConstraintResiduals {
        upper: p.upper_constraints().eval(&pt.x, &[]),
        lower_feas: p
            .lower_constraints(&pt.x, &pt.y)
            .into_iter()
            .map(|v| v - tol.epsilon)
            .collect(),
        duality_gap,
        lambda_neg: pt.lambda.iter().map(|l| -l).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbpOptions {
    pub constraint_tol: f64,
    pub stationarity_tol: f64,
    pub max_major: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    /// A subproblem stops when the merit fell by at most
    /// `stall_tol * (1 + |merit|)` over `stall_window` iterations.
    pub stall_window: usize,
    pub stall_tol: f64,
    pub method: InnerMethod,
    /// Accuracy of the dual-function evaluations.
    pub inner: InnerOptions,
}

impl Default for DbpOptions {
    fn default() -> Self {
        Self {
            constraint_tol: 1e-6,
            stationarity_tol: 1e-5,
            max_major: 50,
            max_inner: 1000,
            initial_penalty: 10.0,
            stall_window: 20,
            stall_tol: 1e-9,
            method: InnerMethod::default(),
            inner: InnerOptions::default(),
        }
    }
}

/// How the augmented-Lagrangian subproblems are minimized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    /// Dense inverse BFGS over all of `(x, y, lambda)`.
    DenseBfgs,
    /// One damped BFGS model per block.
    PartitionedBfgs,
    /// Per-block Newton models from finite differences of the analytic
    /// gradients (blocks are differenced simultaneously).
    #[default]
    PartitionedNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DbpStatus {
    Converged,
    /// Iteration cap reached; the best feasible iterate was returned.
    MaxIter,
    /// Feasible, but the subproblem stopped making progress before reaching
    /// the stationarity tolerance; the best feasible iterate was returned.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MajorIteration {
    pub objective: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub penalty: f64,
    /// Augmented-Lagrangian value at the start and end of the subproblem
    /// (same multipliers and penalty).
    pub merit_start: f64,
    pub merit_end: f64,
    pub inner_iterations: usize,
    /// Merit evaluations, including those spent on curvature models.
    pub inner_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DbpReport {
    pub status: DbpStatus,
    pub start_objective: f64,
    pub objective: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub major_iterations: usize,
    pub inner_iterations: usize,
    pub history: Vec<MajorIteration>,
}

const PENALTY_CAP: f64 = 1e8;

/// Indices into the stacked variable `[x, y, lambda]` and the stacked
/// constraint rows `[G, g - eps, gap]`.
struct Layout {
    nx: usize,
    ny: usize,
    nl: usize,
    n_upper: usize,
    n_lower: usize,
    blocks: usize,
}

impl Layout {
    fn new(p: &BilevelProblem) -> Self {
        Self {
            nx: p.x_dim(),
            ny: p.y_dim(),
            nl: p.constraint_count(),
            n_upper: p.upper_constraints().count(),
            n_lower: p.constraint_count(),
            blocks: p.block_count(),
        }
    }

    fn n_vars(&self) -> usize {
        self.nx + self.ny + self.nl
    }

    fn n_rows(&self) -> usize {
        self.n_upper + self.n_lower + self.blocks
    }

    fn split<'a>(&self, v: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (x, rest) = v.split_at(self.nx);
        let (y, l) = rest.split_at(self.ny);
        (x, y, l)
    }
}

struct BlockPieces {
    jac_x: DMatrix<f64>,
    jac_y: DMatrix<f64>,
    f_grad_x: Vec<f64>,
    f_grad_y: Vec<f64>,
    dual_grad_x: Vec<f64>,
    dual_grad_lambda: Vec<f64>,
}

/// Everything needed for the value and gradient of the merit at one point.
struct Evaluated {
    objective: f64,
    objective_grad: Vec<f64>,
    rows: Vec<f64>,
    upper_jac: DMatrix<f64>,
    pieces: Vec<BlockPieces>,
}

struct Model<'a> {
    p: &'a BilevelProblem,
    layout: Layout,
    tol: FeasibilityTolerance,
    inner: InnerOptions,
}

impl Model<'_> {
    /// `None` when the point is outside the domain of `F` or `f`.
    fn evaluate(&self, v: &[f64]) -> Result<Option<Evaluated>, SolveError> {
        let p = self.p;
        let lay = &self.layout;
        let (x, y, lambda) = lay.split(v);
        let objective = p.upper_objective().eval(x, y);
        if !objective.is_finite() {
            return Ok(None);
        }
        let mut objective_grad = Vec::with_capacity(lay.n_vars());
        objective_grad.extend(p.upper_objective().grad_x(x, y));
        objective_grad.extend(p.upper_objective().grad_y(x, y));
        objective_grad.resize(lay.n_vars(), 0.0);

        let mut rows = Vec::with_capacity(lay.n_rows());
        rows.extend(p.upper_constraints().eval(x, &[]));
        let upper_jac = p.upper_constraints().jac_x(x, &[]);

        let mut gaps = Vec::with_capacity(lay.blocks);
        let mut pieces = Vec::with_capacity(lay.blocks);
        for (b, block) in p.blocks().iter().enumerate() {
            let yb = &y[p.block_y_range(b)];
            let lb = &lambda[p.block_constraint_range(b)];
            let f = block.objective.eval(x, yb);
            if !f.is_finite() {
                return Ok(None);
            }
            rows.extend(block.constraints.eval(x, yb).into_iter().map(|c| c - self.tol.epsilon));
            let d = eval_block(block, x, lb, self.tol.mu, &self.inner)?;
            gaps.push(f - d.value - self.tol.epsilon);
            pieces.push(BlockPieces {
                jac_x: block.constraints.jac_x(x, yb),
                jac_y: block.constraints.jac_y(x, yb),
                f_grad_x: block.objective.grad_x(x, yb),
                f_grad_y: block.objective.grad_y(x, yb),
                dual_grad_x: d.grad_x,
                dual_grad_lambda: d.grad_lambda,
            });
        }
        rows.extend(gaps);
        Ok(Some(Evaluated {
            objective,
            objective_grad,
            rows,
            upper_jac,
            pieces,
        }))
    }

    /// Variables of each element of the merit function: the objective and
    /// upper-level rows over `(x, y)`, then one element per lower-level block
    /// over `(x, y_b, lambda_b)`.
    fn elements(&self) -> Vec<Vec<usize>> {
        let lay = &self.layout;
        let mut out = vec![(0..lay.nx + lay.ny).collect::<Vec<_>>()];
        for b in 0..lay.blocks {
            let mut vars: Vec<usize> = (0..lay.nx).collect();
            vars.extend(self.p.block_y_range(b).map(|j| lay.nx + j));
            vars.extend(self.p.block_constraint_range(b).map(|k| lay.nx + lay.ny + k));
            out.push(vars);
        }
        out
    }

    /// Gradient of the objective element of the merit (objective plus
    /// upper-level rows) at `v`; `false` outside the domain of `F`.
    fn head_gradient(&self, v: &[f64], w: &[f64], rho: f64, out: &mut [f64]) -> bool {
        let p = self.p;
        let lay = &self.layout;
        let (x, y, _) = lay.split(v);
        if !p.upper_objective().eval(x, y).is_finite() {
            return false;
        }
        out[..lay.nx].copy_from_slice(&p.upper_objective().grad_x(x, y));
        out[lay.nx..].copy_from_slice(&p.upper_objective().grad_y(x, y));
        if lay.n_upper > 0 {
            let rows = p.upper_constraints().eval(x, &[]);
            let jac = p.upper_constraints().jac_x(x, &[]);
            for i in 0..lay.n_upper {
                let s = (w[i] + rho * rows[i]).max(0.0);
                if s != 0.0 {
                    for c in 0..lay.nx {
                        out[c] += s * jac[(i, c)];
                    }
                }
            }
        }
        true
    }

    /// Gradient of `F + w' c` split by element (same order as [`Self::elements`]).
    fn lagrangian_elements(&self, e: &Evaluated, w: &[f64], out: &mut [Vec<f64>]) {
        let lay = &self.layout;
        let (nx, ny) = (lay.nx, lay.ny);
        let head = &mut out[0];
        head.copy_from_slice(&e.objective_grad[..nx + ny]);
        for i in 0..lay.n_upper {
            if w[i] != 0.0 {
                for c in 0..nx {
                    head[c] += w[i] * e.upper_jac[(i, c)];
                }
            }
        }
        for (b, pc) in e.pieces.iter().enumerate() {
            let ge = &mut out[1 + b];
            ge.iter_mut().for_each(|v| *v = 0.0);
            let nyb = pc.f_grad_y.len();
            let cr = self.p.block_constraint_range(b);
            for (r, k) in cr.clone().enumerate() {
                let wk = w[lay.n_upper + k];
                if wk == 0.0 {
                    continue;
                }
                for c in 0..nx {
                    ge[c] += wk * pc.jac_x[(r, c)];
                }
                for c in 0..nyb {
                    ge[nx + c] += wk * pc.jac_y[(r, c)];
                }
            }
            let wg = w[lay.n_upper + lay.n_lower + b];
            if wg == 0.0 {
                continue;
            }
            for c in 0..nx {
                ge[c] += wg * (pc.f_grad_x[c] - pc.dual_grad_x[c]);
            }
            for c in 0..nyb {
                ge[nx + c] += wg * pc.f_grad_y[c];
            }
            for r in 0..cr.len() {
                ge[nx + nyb + r] -= wg * pc.dual_grad_lambda[r];
            }
        }
    }

    fn lagrangian_gradient(&self, e: &Evaluated, w: &[f64], elements: &[Vec<usize>]) -> Vec<f64> {
        let mut parts: Vec<Vec<f64>> = elements.iter().map(|v| vec![0.0; v.len()]).collect();
        self.lagrangian_elements(e, w, &mut parts);
        let mut out = vec![0.0; self.layout.n_vars()];
        for (vars, ge) in elements.iter().zip(&parts) {
            for (&i, &gi) in vars.iter().zip(ge) {
                out[i] += gi;
            }
        }
        out
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lay = &self.layout;
        let mut lower = Vec::with_capacity(lay.n_vars());
        let mut upper = Vec::with_capacity(lay.n_vars());
        match self.p.x_box() {
            Some(b) => {
                lower.extend_from_slice(b.lower());
                upper.extend_from_slice(b.upper());
            }
            None => {
                lower.resize(lay.nx, f64::NEG_INFINITY);
                upper.resize(lay.nx, f64::INFINITY);
            }
        }
        let yb = self.p.dbp_y_box();
        lower.extend_from_slice(yb.lower());
        upper.extend_from_slice(yb.upper());
        lower.resize(lay.n_vars(), 0.0);
        upper.resize(lay.n_vars(), f64::INFINITY);
        (lower, upper)
    }
}

fn violation(rows: &[f64]) -> f64 {
    rows.iter().fold(0.0f64, |m, &c| m.max(c))
}

/// PHR augmented Lagrangian value, with its gradient split by element.
fn merit(model: &Model, v: &[f64], w: &[f64], rho: f64, grads: &mut [Vec<f64>]) -> Result<f64, SolveError> {
    let Some(e) = model.evaluate(v)? else {
        return Ok(f64::INFINITY);
    };
    let mut value = e.objective;
    let mut shifted = vec![0.0; w.len()];
    for i in 0..w.len() {
        let s = (w[i] + rho * e.rows[i]).max(0.0);
        value += (s * s - w[i] * w[i]) / (2.0 * rho);
        shifted[i] = s;
    }
    model.lagrangian_elements(&e, &shifted, grads);
    Ok(value)
}

enum Warm {
    Dense(DMatrix<f64>),
    Parts(Vec<DMatrix<f64>>),
}

struct Subproblem {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    evaluations: usize,
    status: QnStatus,
    warm: Warm,
}

const FD_STEP: f64 = 1e-6;

/// Element Hessians of the merit by forward differences of the element
/// gradients. The objective element is differenced coordinate by coordinate
/// (it is cheap); block elements share only `x`, so the k-th `y` (and `lambda`)
/// coordinate of every block can be perturbed in one evaluation.
#[allow(clippy::too_many_arguments)]
fn finite_difference_models(
    model: &Model,
    v: &[f64],
    w: &[f64],
    rho: f64,
    elements: &[Vec<usize>],
    lower: &[f64],
    upper: &[f64],
    base: &[Vec<f64>],
    models: &mut [DMatrix<f64>],
) -> Result<usize, SolveError> {
    let lay = &model.layout;
    let p = model.p;
    // steps point into the box
    let step = |i: usize| {
        let h = FD_STEP * v[i].abs().max(1.0);
        if v[i] + h <= upper[i] || v[i] - h < lower[i] {
            h
        } else {
            -h
        }
    };
    for m in models.iter_mut() {
        m.fill(0.0);
    }

    let head_vars = &elements[0];
    let mut moved = v.to_vec();
    let mut head = vec![0.0; head_vars.len()];
    for (col, &i) in head_vars.iter().enumerate() {
        let h = step(i);
        moved[i] = v[i] + h;
        if model.head_gradient(&moved, w, rho, &mut head) {
            for r in 0..head.len() {
                models[0][(r, col)] = (head[r] - base[0][r]) / h;
            }
        }
        moved[i] = v[i];
    }

    let mut grads: Vec<Vec<f64>> = elements.iter().map(|e| vec![0.0; e.len()]).collect();
    let mut evaluations = 0;
    // (local column in block b) -> global variable, for each colour
    let max_ny = (0..lay.blocks).map(|b| p.block_y_range(b).len()).max().unwrap_or(0);
    let max_m = (0..lay.blocks).map(|b| p.block_constraint_range(b).len()).max().unwrap_or(0);
    let colours = lay.nx + max_ny + max_m;
    for colour in 0..colours {
        // (block, local column, global variable)
        let mut touched: Vec<(usize, usize, usize)> = Vec::new();
        for b in 0..lay.blocks {
            let yr = p.block_y_range(b);
            let cr = p.block_constraint_range(b);
            if colour < lay.nx {
                touched.push((b, colour, colour));
            } else if colour < lay.nx + max_ny {
                let k = colour - lay.nx;
                if k < yr.len() {
                    touched.push((b, lay.nx + k, lay.nx + yr.start + k));
                }
            } else {
                let k = colour - lay.nx - max_ny;
                if k < cr.len() {
                    touched.push((b, lay.nx + yr.len() + k, lay.nx + lay.ny + cr.start + k));
                }
            }
        }
        for &(_, _, i) in &touched {
            moved[i] = v[i] + step(i);
        }
        if touched.is_empty() {
            continue;
        }
        let value = merit(model, &moved, w, rho, &mut grads)?;
        evaluations += 1;
        moved.copy_from_slice(v);
        if !value.is_finite() {
            continue;
        }
        for (b, col, i) in touched {
            let h = step(i);
            let e = 1 + b;
            for r in 0..grads[e].len() {
                models[e][(r, col)] = (grads[e][r] - base[e][r]) / h;
            }
        }
    }
    Ok(evaluations)
}

/// Minimizes the augmented Lagrangian for fixed `(w, rho)` over the box.
#[allow(clippy::too_many_arguments)]
fn subproblem(
    model: &Model,
    v: &[f64],
    w: &[f64],
    rho: f64,
    elements: &[Vec<usize>],
    lower: &[f64],
    upper: &[f64],
    qn: &QnOptions,
    method: InnerMethod,
    warm: Option<Warm>,
) -> Result<Subproblem, SolveError> {
    let mut failure = None;
    let mut eval = |z: &[f64], grads: &mut [Vec<f64>]| match merit(model, z, w, rho, grads) {
        Ok(val) => val,
        Err(err) => {
            failure.get_or_insert(err);
            f64::INFINITY
        }
    };
    let out = if method == InnerMethod::PartitionedNewton {
        let mut hess_failure = None;
        let r = minimize_partitioned_newton(
            &mut eval,
            &mut |z: &[f64], base: &[Vec<f64>], models: &mut [DMatrix<f64>]| {
                match finite_difference_models(model, z, w, rho, elements, lower, upper, base, models) {
                    Ok(used) => used,
                    Err(err) => {
                        hess_failure.get_or_insert(err);
                        0
                    }
                }
            },
            v,
            lower,
            upper,
            elements,
            qn,
        )?;
        if let Some(err) = hess_failure {
            return Err(err);
        }
        Subproblem {
            x: r.x,
            value: r.value,
            iterations: r.iterations,
            evaluations: r.evaluations,
            status: r.status,
            warm: Warm::Parts(r.element_models),
        }
    } else if method == InnerMethod::PartitionedBfgs {
        let warm = match warm {
            Some(Warm::Parts(m)) => Some(m),
            _ => None,
        };
        let r = minimize_partitioned(&mut eval, v, lower, upper, elements, qn, warm)?;
        Subproblem {
            x: r.x,
            value: r.value,
            iterations: r.iterations,
            evaluations: r.evaluations,
            status: r.status,
            warm: Warm::Parts(r.element_models),
        }
    } else {
        let warm = match warm {
            Some(Warm::Dense(h)) => Some(h),
            _ => None,
        };
        let mut parts: Vec<Vec<f64>> = elements.iter().map(|e| vec![0.0; e.len()]).collect();
        let r = minimize_box(
            |z, g| {
                let val = eval(z, &mut parts);
                g.iter_mut().for_each(|gi| *gi = 0.0);
                for (vars, ge) in elements.iter().zip(&parts) {
                    for (&i, &gi) in vars.iter().zip(ge) {
                        g[i] += gi;
                    }
                }
                val
            },
            v,
            lower,
            upper,
            qn,
            warm,
        )?;
        Subproblem {
            x: r.x,
            value: r.value,
            iterations: r.iterations,
            evaluations: r.evaluations,
            status: r.status,
            warm: Warm::Dense(r.inverse_hessian),
        }
    };
    match failure {
        Some(err) => Err(err),
        None => Ok(out),
    }
}

pub fn solve_dbp(
    p: &BilevelProblem,
    start: &DbpPoint,
    tol: FeasibilityTolerance,
    opts: &DbpOptions,
) -> Result<(DbpPoint, DbpReport), SolveError> {
    start.check(p)?;
    if !(tol.epsilon > 0.0 && tol.mu > 0.0) {
        return Err(SolveError::InvalidArgument(format!(
            "the reformulation needs eps > 0 and mu > 0 (got {}, {})",
            tol.epsilon, tol.mu
        )));
    }
    if !(opts.constraint_tol > 0.0 && opts.stationarity_tol > 0.0 && opts.initial_penalty > 0.0) {
        return Err(SolveError::InvalidArgument("solver tolerances and penalty must be positive".into()));
    }
    let model = Model {
        p,
        layout: Layout::new(p),
        tol,
        inner: opts.inner,
    };
    let lay = &model.layout;
    let (lower, upper) = model.bounds();

    let mut v: Vec<f64> = start.x.iter().chain(&start.y).chain(&start.lambda).copied().collect();
    for i in 0..v.len() {
        v[i] = v[i].clamp(lower[i], upper[i]);
    }
    let Some(e0) = model.evaluate(&v)? else {
        return Err(SolveError::NonFiniteStart);
    };
    let start_objective = e0.objective;
    let start_violation = violation(&e0.rows);
    let start_v = v.clone();

    let mut w = vec![0.0; lay.n_rows()];
    let mut rho = opts.initial_penalty;
    let elements = model.elements();
    let mut grads: Vec<Vec<f64>> = elements.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut warm: Option<Warm> = None;
    let mut history = Vec::new();
    let mut inner_iterations = 0;
    let mut prev_violation = start_violation;
    let mut best: Option<(Vec<f64>, f64, f64, f64)> = None; // (v, F, violation, stationarity)
    let mut converged = None;
    // consecutive feasible majors whose subproblem stalled
    let mut stalls = 0;
    let mut worst_violation = start_violation;

    let qn = QnOptions {
        tol: opts.stationarity_tol,
        max_iter: opts.max_inner,
        stall_window: opts.stall_window,
        stall_tol: opts.stall_tol,
        ..QnOptions::default()
    };

    for _ in 0..opts.max_major {
        let merit_start = merit(&model, &v, &w, rho, &mut grads)?;
        let r = subproblem(&model, &v, &w, rho, &elements, &lower, &upper, &qn, opts.method, warm.take())?;
        inner_iterations += r.iterations;
        v = r.x;
        warm = Some(r.warm);

        let e = model
            .evaluate(&v)?
            .expect("accepted quasi-Newton iterates have finite merit");
        let viol = violation(&e.rows);
        worst_violation = worst_violation.min(viol);
        for i in 0..w.len() {
            w[i] = (w[i] + rho * e.rows[i]).max(0.0);
        }
        if viol > opts.constraint_tol {
            stalls = 0;
        }
        let lag = model.lagrangian_gradient(&e, &w, &elements);
        let stationarity = projected_gradient_norm(&v, &lag, &lower, &upper);

        history.push(MajorIteration {
            objective: e.objective,
            max_violation: viol,
            stationarity,
            penalty: rho,
            merit_start,
            merit_end: r.value,
            inner_iterations: r.iterations,
            inner_evaluations: r.evaluations,
        });

        if viol <= opts.constraint_tol {
            let better = match &best {
                Some((_, f, _, _)) => e.objective < *f,
                None => true,
            };
            if better {
                best = Some((v.clone(), e.objective, viol, stationarity));
            }
            if stationarity <= opts.stationarity_tol {
                converged = Some((v.clone(), e.objective, viol, stationarity));
                break;
            }
            stalls = if r.status == QnStatus::Stalled { stalls + 1 } else { 0 };
            if stalls == 2 {
                break;
            }
        } else if viol > 0.25 * prev_violation && rho < PENALTY_CAP {
            rho = (rho * 10.0).min(PENALTY_CAP);
            warm = None;
        }
        prev_violation = viol;
    }

    let (status, chosen) = match converged {
        Some(c) => (DbpStatus::Converged, c),
        None => match best {
            Some(b) if stalls == 2 => (DbpStatus::Stalled, b),
            Some(b) => (DbpStatus::MaxIter, b),
            None if start_violation <= opts.constraint_tol => {
                (DbpStatus::MaxIter, (start_v, start_objective, start_violation, f64::NAN))
            }
            None => {
                return Err(SolveError::NoFeasiblePoint {
                    max_residual: worst_violation,
                })
            }
        },
    };
    let (v, objective, max_violation, stationarity) = chosen;
    let (x, y, lambda) = lay.split(&v);
    let point = DbpPoint {
        x: x.to_vec(),
        y: y.to_vec(),
        lambda: lambda.to_vec(),
    };
    let report = DbpReport {
        status,
        start_objective,
        objective,
        max_violation,
        stationarity,
        major_iterations: history.len(),
        inner_iterations,
        history,
    };
    Ok((point, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{BoxSet, SmoothScalarFn, SmoothVectorFn};
    use approx::assert_abs_diff_eq;

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

    #[test]
    fn residuals_at_lower_level_solution() {
        let p = two_sided();
        let pt = DbpPoint::new(&p, vec![0.0], vec![-1.0], vec![1.0, 0.0]).unwrap();
        let r = residuals(&p, &pt, FeasibilityTolerance::new(0.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(r.duality_gap[0], 0.0, epsilon = 1e-12);
        assert!(r.is_feasible(1e-12));
        let r = residuals(&p, &pt, FeasibilityTolerance::new(0.1, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(r.duality_gap[0], -0.1, epsilon = 1e-12);
        assert!(r.max_residual() < 0.0 || r.lambda_neg.contains(&0.0));
    }

    #[test]
    fn residuals_flag_wrong_response() {
        let p = two_sided();
        let pt = DbpPoint::new(&p, vec![0.0], vec![1.0], vec![1.0, 0.0]).unwrap();
        let r = residuals(&p, &pt, FeasibilityTolerance::new(0.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(r.duality_gap[0], 2.0, epsilon = 1e-12);
        assert!(!r.is_feasible(1e-6));
    }

    #[test]
    fn solver_entry_requires_positive_tolerances() {
        let p = two_sided();
        let pt = DbpPoint::new(&p, vec![0.0], vec![-1.0], vec![1.0, 0.0]).unwrap();
        for (e, m) in [(0.0, 1e-4), (0.1, 0.0)] {
            let tol = FeasibilityTolerance::new(e, m).unwrap();
            assert!(solve_dbp(&p, &pt, tol, &DbpOptions::default()).is_err());
        }
        assert!(FeasibilityTolerance::new(-1.0, 0.0).is_err());
        assert!(DbpPoint::new(&p, vec![0.0], vec![-1.0], vec![-1.0, 0.0]).is_err());
    }
}
