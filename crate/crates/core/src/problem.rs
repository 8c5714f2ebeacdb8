//! Data model for optimistic bilevel programs
//!
//! ```text
//! min_{x,y}  F(x,y)   s.t.  G(x) <= 0,
//!            y in argmin_y { f(x,y) | g(x,y) <= 0 }
//! ```
//!
//! Every function is supplied as an oracle with analytic first derivatives.
//! The lower level may be split into independent blocks that share `x`
//! (`f = sum_b f_b(x, y_b)`, `g = (g_1, ..., g_B)`); a problem with one block is
//! the general case. Each block carries the compact box `Y_b` over which the
//! constrained dual function minimizes. The box is problem knowledge: it has to
//! contain the lower-level feasible set strictly inside its interior, and the
//! library only checks that it is finite and ordered.
//!
//! Equality constraints are written as two opposite inequalities. Declaring
//! such a pair with [`SmoothVectorFn::with_equality_pair`] lets the lower-level
//! solver treat it as an equality instead of looking for a strictly feasible
//! point that cannot exist.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::oracles::finite_diff_grad;

type ScalarEval = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type VectorEval = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type MatrixEval = Arc<dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Componentwise bounds `lower <= v <= upper`, all finite.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::BoxLength {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        for (index, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(ModelError::InvalidBox {
                    index,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lo, hi]^dim`
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self, ModelError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&vi, (&lo, &hi))| vi >= lo && vi <= hi)
    }

    pub fn project(&self, v: &mut [f64]) {
        for (vi, (&lo, &hi)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *vi = vi.clamp(lo, hi);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    /// The point of the box closest to the origin.
    pub fn origin_projection(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.project(&mut v);
        v
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect()
    }
}

/// Scalar oracle `phi(x, y)` with its partial gradients.
#[derive(Clone)]
pub struct SmoothScalarFn {
    name: String,
    x_dim: usize,
    y_dim: usize,
    eval: ScalarEval,
    grad_x: VectorEval,
    grad_y: VectorEval,
}

impl SmoothScalarFn {
    pub fn new(
        name: impl Into<String>,
        x_dim: usize,
        y_dim: usize,
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        grad_x: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        grad_y: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            x_dim,
            y_dim,
            eval: Arc::new(eval),
            grad_x: Arc::new(grad_x),
            grad_y: Arc::new(grad_y),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.eval)(x, y)
    }

    #[inline]
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (self.grad_x)(x, y)
    }

    #[inline]
    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (self.grad_y)(x, y)
    }
}

impl fmt::Debug for SmoothScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothScalarFn")
            .field("name", &self.name)
            .field("x_dim", &self.x_dim)
            .field("y_dim", &self.y_dim)
            .finish()
    }
}

/// Vector oracle `c(x, y)` with Jacobians (`count x x_dim` and `count x y_dim`).
#[derive(Clone)]
pub struct SmoothVectorFn {
    name: String,
    x_dim: usize,
    y_dim: usize,
    count: usize,
    eval: VectorEval,
    jac_x: MatrixEval,
    jac_y: MatrixEval,
    equality_pairs: Vec<(usize, usize)>,
}

impl SmoothVectorFn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        x_dim: usize,
        y_dim: usize,
        count: usize,
        eval: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac_x: impl Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        jac_y: impl Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            x_dim,
            y_dim,
            count,
            eval: Arc::new(eval),
            jac_x: Arc::new(jac_x),
            jac_y: Arc::new(jac_y),
            equality_pairs: Vec::new(),
        }
    }

    /// A constraint map with no components.
    pub fn empty(name: impl Into<String>, x_dim: usize, y_dim: usize) -> Self {
        Self::new(
            name,
            x_dim,
            y_dim,
            0,
            |_, _| Vec::new(),
            move |_, _| DMatrix::zeros(0, x_dim),
            move |_, _| DMatrix::zeros(0, y_dim),
        )
    }

    /// Declares components `i` and `j` as the two halves of an equality
    /// (`c_j = -c_i`).
    pub fn with_equality_pair(mut self, i: usize, j: usize) -> Result<Self, ModelError> {
        let used = |k: usize| self.equality_pairs.iter().any(|&(a, b)| a == k || b == k);
        if i == j || i >= self.count || j >= self.count || used(i) || used(j) {
            return Err(ModelError::BadEqualityPair(i, j));
        }
        self.equality_pairs.push((i, j));
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn equality_pairs(&self) -> &[(usize, usize)] {
        &self.equality_pairs
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (self.eval)(x, y)
    }

    #[inline]
    pub fn jac_x(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        (self.jac_x)(x, y)
    }

    #[inline]
    pub fn jac_y(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        (self.jac_y)(x, y)
    }
}

impl fmt::Debug for SmoothVectorFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothVectorFn")
            .field("name", &self.name)
            .field("count", &self.count)
            .field("equality_pairs", &self.equality_pairs)
            .finish()
    }
}

/// One independent piece of the lower level: `min { f_b(x, y_b) | g_b(x, y_b) <= 0 }`.
#[derive(Debug, Clone)]
pub struct LowerBlock {
    pub objective: SmoothScalarFn,
    pub constraints: SmoothVectorFn,
    pub y_box: BoxSet,
}

impl LowerBlock {
    pub fn new(objective: SmoothScalarFn, constraints: SmoothVectorFn, y_box: BoxSet) -> Self {
        Self {
            objective,
            constraints,
            y_box,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    y: Range<usize>,
    c: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct BilevelProblem {
    x_dim: usize,
    y_dim: usize,
    constraint_count: usize,
    upper_objective: SmoothScalarFn,
    upper_constraints: SmoothVectorFn,
    x_box: Option<BoxSet>,
    blocks: Vec<LowerBlock>,
    layout: Vec<BlockLayout>,
    dbp_y_box: Option<BoxSet>,
}

impl BilevelProblem {
    /// Single-block problem. `upper_constraints` is a function of `x` only and
    /// must be declared with `y_dim == 0`.
    pub fn new(
        upper_objective: SmoothScalarFn,
        upper_constraints: SmoothVectorFn,
        lower_objective: SmoothScalarFn,
        lower_constraints: SmoothVectorFn,
        y_box: BoxSet,
    ) -> Result<Self, ModelError> {
        Self::with_blocks(
            upper_objective,
            upper_constraints,
            vec![LowerBlock::new(lower_objective, lower_constraints, y_box)],
        )
    }

    pub fn with_blocks(
        upper_objective: SmoothScalarFn,
        upper_constraints: SmoothVectorFn,
        blocks: Vec<LowerBlock>,
    ) -> Result<Self, ModelError> {
        if blocks.is_empty() {
            return Err(ModelError::NoBlocks);
        }
        let x_dim = upper_objective.x_dim();
        let mismatch = |oracle: &str, what: &'static str, expected: usize, found: usize| {
            ModelError::DimensionMismatch {
                oracle: oracle.to_string(),
                what,
                expected,
                found,
            }
        };

        let mut layout = Vec::with_capacity(blocks.len());
        let (mut y_off, mut c_off) = (0, 0);
        for block in &blocks {
            let dy = block.y_box.dim();
            for (name, xd, yd) in [
                (block.objective.name(), block.objective.x_dim(), block.objective.y_dim()),
                (
                    block.constraints.name(),
                    block.constraints.x_dim(),
                    block.constraints.y_dim(),
                ),
            ] {
                if xd != x_dim {
                    return Err(mismatch(name, "x_dim", x_dim, xd));
                }
                if yd != dy {
                    return Err(mismatch(name, "y_dim (block box)", dy, yd));
                }
            }
            let nc = block.constraints.count();
            layout.push(BlockLayout {
                y: y_off..y_off + dy,
                c: c_off..c_off + nc,
            });
            y_off += dy;
            c_off += nc;
        }

        if upper_objective.y_dim() != y_off {
            return Err(mismatch(upper_objective.name(), "y_dim", y_off, upper_objective.y_dim()));
        }
        if upper_constraints.x_dim() != x_dim {
            return Err(mismatch(
                upper_constraints.name(),
                "x_dim",
                x_dim,
                upper_constraints.x_dim(),
            ));
        }
        if upper_constraints.y_dim() != 0 {
            return Err(mismatch(
                upper_constraints.name(),
                "y_dim (upper constraints depend on x only)",
                0,
                upper_constraints.y_dim(),
            ));
        }

        let problem = Self {
            x_dim,
            y_dim: y_off,
            constraint_count: c_off,
            upper_objective,
            upper_constraints,
            x_box: None,
            blocks,
            layout,
            dbp_y_box: None,
        };
        problem.probe_dimensions()?;
        Ok(problem)
    }

    /// Box-shaped part of `X`, enforced by projection in the outer solver.
    pub fn with_x_box(mut self, x_box: BoxSet) -> Result<Self, ModelError> {
        if x_box.dim() != self.x_dim {
            return Err(ModelError::DimensionMismatch {
                oracle: "x_box".into(),
                what: "x_dim",
                expected: self.x_dim,
                found: x_box.dim(),
            });
        }
        self.x_box = Some(x_box);
        self.probe_dimensions()?;
        Ok(self)
    }

    /// Bounds on `y` inside the single-level reformulation. Defaults to the
    /// concatenated lower-level boxes.
    pub fn with_dbp_y_box(mut self, y_box: BoxSet) -> Result<Self, ModelError> {
        if y_box.dim() != self.y_dim {
            return Err(ModelError::DimensionMismatch {
                oracle: "dbp_y_box".into(),
                what: "y_dim",
                expected: self.y_dim,
                found: y_box.dim(),
            });
        }
        self.dbp_y_box = Some(y_box);
        Ok(self)
    }

    /// Evaluates every oracle once at a box center and checks the returned
    /// lengths against the declared dimensions.
    fn probe_dimensions(&self) -> Result<(), ModelError> {
        let x = match &self.x_box {
            Some(b) => b.center(),
            None => vec![0.0; self.x_dim],
        };
        let y = self.y_box().center();
        let check = |oracle: &str, what: &'static str, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch {
                    oracle: oracle.to_string(),
                    what,
                    expected,
                    found,
                })
            }
        };
        let uo = &self.upper_objective;
        check(uo.name(), "grad_x length", self.x_dim, uo.grad_x(&x, &y).len())?;
        check(uo.name(), "grad_y length", self.y_dim, uo.grad_y(&x, &y).len())?;
        let uc = &self.upper_constraints;
        check(uc.name(), "eval length", uc.count(), uc.eval(&x, &[]).len())?;
        let jx = uc.jac_x(&x, &[]);
        check(uc.name(), "jac_x rows", uc.count(), jx.nrows())?;
        check(uc.name(), "jac_x cols", self.x_dim, jx.ncols())?;
        for (b, block) in self.blocks.iter().enumerate() {
            let yb = &y[self.layout[b].y.clone()];
            let f = &block.objective;
            check(f.name(), "grad_x length", self.x_dim, f.grad_x(&x, yb).len())?;
            check(f.name(), "grad_y length", yb.len(), f.grad_y(&x, yb).len())?;
            let g = &block.constraints;
            check(g.name(), "eval length", g.count(), g.eval(&x, yb).len())?;
            let jx = g.jac_x(&x, yb);
            let jy = g.jac_y(&x, yb);
            check(g.name(), "jac_x rows", g.count(), jx.nrows())?;
            check(g.name(), "jac_x cols", self.x_dim, jx.ncols())?;
            check(g.name(), "jac_y rows", g.count(), jy.nrows())?;
            check(g.name(), "jac_y cols", yb.len(), jy.ncols())?;
        }
        Ok(())
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    /// Total number of lower-level constraint components (= multiplier count).
    pub fn constraint_count(&self) -> usize {
        self.constraint_count
    }

    pub fn upper_objective(&self) -> &SmoothScalarFn {
        &self.upper_objective
    }

    pub fn upper_constraints(&self) -> &SmoothVectorFn {
        &self.upper_constraints
    }

    pub fn x_box(&self) -> Option<&BoxSet> {
        self.x_box.as_ref()
    }

    pub fn blocks(&self) -> &[LowerBlock] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_y_range(&self, b: usize) -> Range<usize> {
        self.layout[b].y.clone()
    }

    pub fn block_constraint_range(&self, b: usize) -> Range<usize> {
        self.layout[b].c.clone()
    }

    /// Concatenation of the block boxes `Y`.
    pub fn y_box(&self) -> BoxSet {
        let mut lower = Vec::with_capacity(self.y_dim);
        let mut upper = Vec::with_capacity(self.y_dim);
        for b in &self.blocks {
            lower.extend_from_slice(b.y_box.lower());
            upper.extend_from_slice(b.y_box.upper());
        }
        BoxSet { lower, upper }
    }

    pub fn dbp_y_box(&self) -> BoxSet {
        self.dbp_y_box.clone().unwrap_or_else(|| self.y_box())
    }

    /// `f(x, y) = sum_b f_b(x, y_b)`
    pub fn lower_objective(&self, x: &[f64], y: &[f64]) -> f64 {
        self.blocks
            .iter()
            .zip(&self.layout)
            .map(|(b, l)| b.objective.eval(x, &y[l.y.clone()]))
            .sum()
    }

    /// `g(x, y)`, blocks concatenated.
    pub fn lower_constraints(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.constraint_count);
        for (b, l) in self.blocks.iter().zip(&self.layout) {
            out.extend(b.constraints.eval(x, &y[l.y.clone()]));
        }
        out
    }

    /// `max_i G_i(x)`, or `-inf` without upper constraints.
    pub fn upper_violation(&self, x: &[f64]) -> f64 {
        let mut v = self
            .upper_constraints
            .eval(x, &[])
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if let Some(b) = &self.x_box {
            for (i, &xi) in x.iter().enumerate() {
                v = v.max(b.lower()[i] - xi).max(xi - b.upper()[i]);
            }
        }
        v
    }
}

/// Finite-difference agreement for one derivative of one oracle.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleCheck {
    pub oracle: String,
    pub derivative: &'static str,
    pub max_rel_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    pub checks: Vec<OracleCheck>,
    /// Sample points where some oracle was not finite.
    pub skipped_points: usize,
    pub samples: usize,
}

impl ValidationReport {
    pub const FLAG_THRESHOLD: f64 = 1e-4;

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.flagged)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &OracleCheck> {
        self.checks.iter().filter(|c| c.flagged)
    }
}

const FD_STEP: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

struct ErrorTracker {
    checks: Vec<OracleCheck>,
}

impl ErrorTracker {
    fn record(&mut self, oracle: &str, derivative: &'static str, analytic: &[f64], numeric: &[f64]) {
        let err = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_error(a, n))
            .fold(0.0, f64::max);
        match self
            .checks
            .iter_mut()
            .find(|c| c.oracle == oracle && c.derivative == derivative)
        {
            Some(c) => c.max_rel_error = c.max_rel_error.max(err),
            None => self.checks.push(OracleCheck {
                oracle: oracle.to_string(),
                derivative,
                max_rel_error: err,
                flagged: false,
            }),
        }
    }
}

fn check_scalar(t: &mut ErrorTracker, f: &SmoothScalarFn, x: &[f64], y: &[f64]) {
    let fd_x = finite_diff_grad(|v: &[f64]| f.eval(v, y), x, FD_STEP);
    let fd_y = finite_diff_grad(|v: &[f64]| f.eval(x, v), y, FD_STEP);
    t.record(f.name(), "grad_x", &f.grad_x(x, y), &fd_x);
    t.record(f.name(), "grad_y", &f.grad_y(x, y), &fd_y);
}

fn check_vector(t: &mut ErrorTracker, g: &SmoothVectorFn, x: &[f64], y: &[f64]) {
    let jx = g.jac_x(x, y);
    let jy = g.jac_y(x, y);
    for i in 0..g.count() {
        let fd_x = finite_diff_grad(|v: &[f64]| g.eval(v, y)[i], x, FD_STEP);
        let row: Vec<f64> = jx.row(i).iter().copied().collect();
        t.record(g.name(), "jac_x", &row, &fd_x);
        if !y.is_empty() {
            let fd_y = finite_diff_grad(|v: &[f64]| g.eval(x, v)[i], y, FD_STEP);
            let row: Vec<f64> = jy.row(i).iter().copied().collect();
            t.record(g.name(), "jac_y", &row, &fd_y);
        }
    }
}

/// Compares every analytic derivative against central differences (step
/// 1e-6) at `samples` random points drawn from `x_box` and the lower-level box.
/// Points where an oracle is not finite within one step are skipped.
pub fn validate_problem(
    p: &BilevelProblem,
    x_box: &BoxSet,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport, ModelError> {
    if x_box.dim() != p.x_dim() {
        return Err(ModelError::DimensionMismatch {
            oracle: "validation x box".into(),
            what: "x_dim",
            expected: p.x_dim(),
            found: x_box.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_box = p.y_box();
    let mut tracker = ErrorTracker { checks: Vec::new() };
    let mut skipped = 0;

    for _ in 0..samples {
        let x = x_box.sample(&mut rng);
        let y = y_box.sample(&mut rng);
        if !finite_nearby(p, &x, &y) {
            skipped += 1;
            continue;
        }
        check_scalar(&mut tracker, p.upper_objective(), &x, &y);
        check_vector(&mut tracker, p.upper_constraints(), &x, &[]);
        for (b, block) in p.blocks().iter().enumerate() {
            let yb = &y[p.block_y_range(b)];
            check_scalar(&mut tracker, &block.objective, &x, yb);
            check_vector(&mut tracker, &block.constraints, &x, yb);
        }
    }

    let mut checks = tracker.checks;
    for c in &mut checks {
        c.flagged = !(c.max_rel_error <= ValidationReport::FLAG_THRESHOLD);
    }
    Ok(ValidationReport {
        checks,
        skipped_points: skipped,
        samples,
    })
}

fn finite_nearby(p: &BilevelProblem, x: &[f64], y: &[f64]) -> bool {
    let probe = |x: &[f64], y: &[f64]| {
        p.upper_objective().eval(x, y).is_finite()
            && p.lower_objective(x, y).is_finite()
            && p.lower_constraints(x, y).iter().all(|v| v.is_finite())
    };
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    if !probe(&xs, &ys) {
        return false;
    }
    for sign in [-1.0, 1.0] {
        xs.iter_mut().zip(x).for_each(|(a, &b)| *a = b + sign * 2.0 * FD_STEP);
        ys.iter_mut().zip(y).for_each(|(a, &b)| *a = b + sign * 2.0 * FD_STEP);
        if !probe(&xs, &ys) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_lower(scale: f64) -> BilevelProblem {
        let upper = SmoothScalarFn::new(
            "F",
            1,
            1,
            |x, y| (x[0] - y[0]).powi(2),
            |x, y| vec![2.0 * (x[0] - y[0])],
            |x, y| vec![-2.0 * (x[0] - y[0])],
        );
        let lower = SmoothScalarFn::new("f", 1, 1, |_, y| y[0], |_, _| vec![0.0], move |_, _| vec![scale]);
        BilevelProblem::new(
            upper,
            SmoothVectorFn::empty("G", 1, 0),
            lower,
            SmoothVectorFn::empty("g", 1, 1),
            BoxSet::uniform(1, -2.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn box_rejects_bad_bounds() {
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxSet::new(vec![f64::NEG_INFINITY], vec![0.0]).is_err());
        assert!(BoxSet::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(BoxSet::new(vec![f64::NAN], vec![0.0]).is_err());
        let b = BoxSet::new(vec![-1.0, 0.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(b.center(), vec![0.0, 0.0]);
        let mut v = vec![3.0, -2.0];
        b.project(&mut v);
        assert_eq!(v, vec![1.0, 0.0]);
    }

    #[test]
    fn linear_function_has_zero_fd_error() {
        let p = linear_lower(1.0);
        let r = validate_problem(&p, &BoxSet::uniform(1, -1.0, 1.0).unwrap(), 10, 7).unwrap();
        assert!(r.passed());
        let f = r.checks.iter().find(|c| c.oracle == "f" && c.derivative == "grad_y").unwrap();
        assert!(f.max_rel_error < 1e-9, "{}", f.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let p = linear_lower(2.0);
        let r = validate_problem(&p, &BoxSet::uniform(1, -1.0, 1.0).unwrap(), 5, 1).unwrap();
        assert!(!r.passed());
        let flagged: Vec<_> = r.flagged().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].oracle, "f");
        assert_eq!(flagged[0].derivative, "grad_y");
    }

    #[test]
    fn dimension_mismatch_names_the_oracle() {
        let upper = SmoothScalarFn::new("F", 1, 2, |_, _| 0.0, |_, _| vec![0.0], |_, _| vec![0.0, 0.0]);
        let lower = SmoothScalarFn::new("f_bad", 1, 1, |_, y| y[0], |_, _| vec![0.0], |_, _| vec![1.0]);
        let err = BilevelProblem::new(
            upper,
            SmoothVectorFn::empty("G", 1, 0),
            lower,
            SmoothVectorFn::empty("g", 1, 2),
            BoxSet::uniform(2, -1.0, 1.0).unwrap(),
        )
        .unwrap_err();
        match err {
            ModelError::DimensionMismatch { oracle, .. } => assert_eq!(oracle, "f_bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probe_catches_wrong_output_length() {
        let upper = SmoothScalarFn::new("F", 1, 1, |_, _| 0.0, |_, _| vec![0.0], |_, _| vec![0.0]);
        let lower = SmoothScalarFn::new("f", 1, 1, |_, y| y[0], |_, _| vec![0.0], |_, _| vec![1.0]);
        let g = SmoothVectorFn::new(
            "g_short",
            1,
            1,
            2,
            |_, y| vec![y[0] - 1.0],
            |_, _| DMatrix::zeros(2, 1),
            |_, _| DMatrix::zeros(2, 1),
        );
        let err = BilevelProblem::new(
            upper,
            SmoothVectorFn::empty("G", 1, 0),
            lower,
            g,
            BoxSet::uniform(1, -2.0, 2.0).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { ref oracle, .. } if oracle == "g_short"));
    }

    #[test]
    fn equality_pairs_are_validated() {
        let g = SmoothVectorFn::new(
            "g",
            1,
            1,
            2,
            |_, y| vec![y[0], -y[0]],
            |_, _| DMatrix::zeros(2, 1),
            |_, _| DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        );
        assert!(g.clone().with_equality_pair(0, 0).is_err());
        assert!(g.clone().with_equality_pair(0, 2).is_err());
        let g = g.with_equality_pair(0, 1).unwrap();
        assert_eq!(g.equality_pairs(), &[(0, 1)]);
        assert!(g.with_equality_pair(1, 0).is_err());
    }
}
