//! Self-checks of the dual machinery against the brute-force oracles.
//!
//! Each check returns a [`CheckResult`] with the measured quantity and the
//! tolerance it was held to, so callers can print or serialize the outcome.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dbp::{residuals_with, DbpPoint, FeasibilityTolerance};
use crate::dual::{eval_rdf, eval_rdf_with, maximize_dual, AscentOptions};
use crate::error::SolveError;
use crate::inner::{solve_lower, InnerOptions};
use crate::oracles::{finite_diff_grad, grid_minimize, lp_ldf_closed_form, ExtendedReal, GridSpec};
use crate::problem::{BilevelProblem, BoxSet, SmoothScalarFn, SmoothVectorFn};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error, or violation count for the counting checks.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn bound(name: &'static str, metric: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            // NaN fails
            passed: metric <= tolerance,
            metric,
            tolerance,
            detail,
        }
    }

    fn error(name: &'static str, err: impl std::fmt::Display) -> Self {
        Self {
            name,
            passed: false,
            metric: f64::NAN,
            tolerance: 0.0,
            detail: format!("error: {err}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckSummary {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Test hook: perturbs the analytic `grad_x` before it is compared, so the
    /// gradient check must fail.
    pub inject_gradient_bug: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            inject_gradient_bug: false,
        }
    }
}

pub fn run_all(opts: &CheckOptions) -> CheckSummary {
    let checks = vec![
        golden_dual_values(opts.seed),
        ldf_closed_form_values(),
        ldf_cdf_maximum(),
        rdf_gradients(opts.seed, opts.inject_gradient_bug),
        feasible_set_nesting(opts.seed),
        epsilon_solution_sets(),
        mu_monotonicity(opts.seed),
    ];
    CheckSummary {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn zero_upper(nx: usize, ny: usize) -> (SmoothScalarFn, SmoothVectorFn) {
    (
        SmoothScalarFn::new("zero", nx, ny, |_, _| 0.0, move |_, _| vec![0.0; nx], move |_, _| vec![0.0; ny]),
        SmoothVectorFn::empty("none", nx, 0),
    )
}

/// `min { c y | -y - 1 <= 0, y - 1 <= 0 }` over `Y = [-2, 2]`, `c = x + offset`.
/// With `x = 0, offset = 1` the dual function is `-2|1 - l1 + l2| - l1 - l2`.
pub fn interval_lp(offset: f64) -> BilevelProblem {
    let (upper, upper_g) = zero_upper(1, 1);
    BilevelProblem::new(
        upper,
        upper_g,
        SmoothScalarFn::new(
            "linear_cost",
            1,
            1,
            move |x, y| (x[0] + offset) * y[0],
            |_, y| vec![y[0]],
            move |x, _| vec![x[0] + offset],
        ),
        SmoothVectorFn::new(
            "unit_interval",
            1,
            1,
            2,
            |_, y| vec![-y[0] - 1.0, y[0] - 1.0],
            |_, _| DMatrix::zeros(2, 1),
            |_, _| DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
        ),
        BoxSet::uniform(1, -2.0, 2.0).expect("valid box"),
    )
    .expect("valid problem")
}

fn interval_dual_closed_form(l1: f64, l2: f64) -> f64 {
    -2.0 * (1.0 - l1 + l2).abs() - l1 - l2
}

/// Random convex quadratic lower level in `y` (dimension 1..=3) coupled to a
/// two-dimensional `x`:
/// `f = 1/2 y'Qy + (Cx + d)'y`, `g = Ay + Bx - b`, `Y = [-2, 2]^ny`.
/// `Q` is positive definite when `strict`, otherwise positive semidefinite of rank 1.
pub fn random_quadratic(rng: &mut impl Rng, strict: bool) -> BilevelProblem {
    let ny = rng.random_range(1..=3usize);
    let nx = 2;
    let m = rng.random_range(1..=3usize);
    let mut uni = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let l = uni(ny, ny);
    let q = if strict {
        &l * l.transpose() + DMatrix::identity(ny, ny) * 0.5
    } else {
        let v = l.column(0).into_owned();
        &v * v.transpose()
    };
    let cm = uni(ny, nx);
    let d = uni(ny, 1).column(0).into_owned();
    let a = uni(m, ny);
    let bm = uni(m, nx);
    // keep y = 0 strictly feasible for |x| <= 1
    let b = DVector::from_iterator(m, bm.row_iter().map(|r| r.abs().sum() + 0.5));

    let (qf, cf, df) = (q.clone(), cm.clone(), d.clone());
    let (qg, cg, dg) = (q, cm.clone(), d);
    let c_x = cm;
    let (ae, be, bv) = (a.clone(), bm.clone(), b);
    let (aj, bj) = (a, bm);
    let (upper, upper_g) = zero_upper(nx, ny);
    BilevelProblem::new(
        upper,
        upper_g,
        SmoothScalarFn::new(
            "random_quadratic",
            nx,
            ny,
            move |x, y| {
                let y = DVector::from_column_slice(y);
                let lin = &cf * DVector::from_column_slice(x) + &df;
                0.5 * y.dot(&(&qf * &y)) + lin.dot(&y)
            },
            move |_, y| (c_x.transpose() * DVector::from_column_slice(y)).as_slice().to_vec(),
            move |x, y| {
                let yv = DVector::from_column_slice(y);
                (&qg * yv + &cg * DVector::from_column_slice(x) + &dg).as_slice().to_vec()
            },
        ),
        SmoothVectorFn::new(
            "random_linear",
            nx,
            ny,
            m,
            move |x, y| {
                (&ae * DVector::from_column_slice(y) + &be * DVector::from_column_slice(x) - &bv)
                    .as_slice()
                    .to_vec()
            },
            move |_, _| bj.clone(),
            move |_, _| aj.clone(),
        ),
        BoxSet::uniform(ny, -2.0, 2.0).expect("valid box"),
    )
    .expect("valid problem")
}

/// Closed-form dual values of the interval LP at `mu = 0` (100 random
/// multipliers) and its regularized maximizer at `mu = 1e-8`.
pub fn golden_dual_values(seed: u64) -> CheckResult {
    const NAME: &str = "golden_dual_values";
    let p = interval_lp(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        match eval_rdf(&p, &[0.0], &l, 0.0) {
            Ok(d) => worst = worst.max((d.value - interval_dual_closed_form(l[0], l[1])).abs()),
            Err(e) => return CheckResult::error(NAME, e),
        }
    }
    let max = match maximize_dual(&p, &[0.0], 1e-8, &AscentOptions::default()) {
        Ok(m) => m,
        Err(e) => return CheckResult::error(NAME, e),
    };
    let lambda_err = (max.lambda[0] - 1.0).abs().max(max.lambda[1].abs());
    let value_err = (max.value + 1.0).abs();
    let passed = worst <= 1e-8 && lambda_err <= 1e-4 && value_err <= 1e-6;
    CheckResult {
        name: NAME,
        passed,
        metric: worst,
        tolerance: 1e-8,
        detail: format!(
            "max |h - closed form| = {worst:.3e}; argmax = ({:.6}, {:.6}) (tol 1e-4); max value = {:.9} (tol 1e-6)",
            max.lambda[0], max.lambda[1], max.value
        ),
    }
}

fn interval_lp_data() -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    (
        DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
        DVector::from_vec(vec![1.0, 1.0]),
        DVector::from_vec(vec![1.0]),
    )
}

/// Textbook LP dual at three multipliers, including one outside its domain.
pub fn ldf_closed_form_values() -> CheckResult {
    let (a, b, c) = interval_lp_data();
    let at = |l1: f64, l2: f64| lp_ldf_closed_form(&a, &b, &c, &DVector::from_vec(vec![l1, l2]), 1e-12);
    let cases = [
        (at(1.0, 0.0), ExtendedReal::Finite(-1.0)),
        (at(0.0, 0.0), ExtendedReal::NegInfinity),
        (at(2.0, 1.0), ExtendedReal::Finite(interval_dual_closed_form(2.0, 1.0))),
    ];
    let wrong = cases.iter().filter(|(got, want)| got != want).count();
    CheckResult::bound(
        "ldf_closed_form_values",
        wrong as f64,
        0.0,
        format!("{wrong} of {} golden values differ", cases.len()),
    )
}

/// The LP dual's maximum over a grid of its domain equals the maximum of the
/// constrained dual function.
pub fn ldf_cdf_maximum() -> CheckResult {
    const NAME: &str = "ldf_cdf_maximum";
    let (a, b, c) = interval_lp_data();
    // domain: l1 = 1 + l2, l >= 0, up to l1 = 10
    let grid = match GridSpec::line(0.0, 9.0, 1e-3) {
        Ok(g) => g,
        Err(e) => return CheckResult::error(NAME, e),
    };
    let (_, neg_best) = grid_minimize(
        |v| match lp_ldf_closed_form(&a, &b, &c, &DVector::from_vec(vec![1.0 + v[0], v[0]]), 1e-9) {
            ExtendedReal::Finite(psi) => -psi,
            ExtendedReal::NegInfinity => f64::INFINITY,
        },
        &grid,
    );
    let cdf = match maximize_dual(&interval_lp(1.0), &[0.0], 1e-8, &AscentOptions::default()) {
        Ok(m) => m.value,
        Err(e) => return CheckResult::error(NAME, e),
    };
    let err = (-neg_best - cdf).abs();
    CheckResult::bound(
        NAME,
        err,
        1e-4,
        format!("LDF grid max {:.9}, CDF max {cdf:.9}", -neg_best),
    )
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1.0)
}

/// Envelope gradients of `h_mu` against central differences on 50 random
/// strictly convex quadratic lower levels, for each `mu` in `{1e-6, 1e-4, 1e-2}`.
pub fn rdf_gradients(seed: u64, inject_bug: bool) -> CheckResult {
    const NAME: &str = "rdf_gradients";
    const STEP: f64 = 1e-5;
    let inner = InnerOptions {
        tol: 1e-12,
        ..InnerOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut worst: f64 = 0.0;
    let mut evaluations = 0;
    for _ in 0..50 {
        let p = random_quadratic(&mut rng, true);
        let x: Vec<f64> = (0..p.x_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda: Vec<f64> = (0..p.constraint_count()).map(|_| rng.random_range(0.0..2.0)).collect();
        for mu in [1e-6, 1e-4, 1e-2] {
            let d = match eval_rdf_with(&p, &x, &lambda, mu, &inner) {
                Ok(d) => d,
                Err(e) => return CheckResult::error(NAME, e),
            };
            let value = |xv: &[f64], lv: &[f64]| {
                eval_rdf_with(&p, xv, lv, mu, &inner)
                    .map(|d| d.value)
                    .unwrap_or(f64::NAN)
            };
            let fd_x = finite_diff_grad(|v| value(v, &lambda), &x, STEP);
            // multipliers are drawn away from zero, so the probe stays feasible
            let fd_l = finite_diff_grad(|v| value(&x, v), &lambda, STEP.min(lambda.iter().fold(1.0, |m, &l| f64::min(m, l)) / 2.0));
            let mut grad_x = d.grad_x.clone();
            if inject_bug {
                grad_x[0] += 1e-2 * (1.0 + grad_x[0].abs());
            }
            for (a, n) in grad_x.iter().zip(&fd_x).chain(d.grad_lambda.iter().zip(&fd_l)) {
                worst = worst.max(rel_err(*a, *n));
            }
            evaluations += 1;
        }
    }
    CheckResult::bound(
        NAME,
        worst,
        1e-4,
        format!("max relative error {worst:.3e} over {evaluations} (instance, mu) pairs"),
    )
}

/// Membership in `C(eps2, mu2)` implies membership in `C(eps1, mu1)` whenever
/// `eps1 >= eps2` and `mu1 >= mu2`.
pub fn feasible_set_nesting(seed: u64) -> CheckResult {
    const NAME: &str = "feasible_set_nesting";
    let inner = InnerOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7374);
    let (mut violations, mut tested, mut members) = (0, 0, 0);
    for _ in 0..100 {
        let strict = rng.random_bool(0.5);
        let p = random_quadratic(&mut rng, strict);
        let x: Vec<f64> = (0..p.x_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lower = match solve_lower(&p, &x, &inner) {
            Ok(s) => s,
            Err(e) => return CheckResult::error(NAME, e),
        };
        let spread = rng.random_range(0.0..0.5);
        let y: Vec<f64> = lower.y_star.iter().map(|v| v + spread * rng.random_range(-1.0..1.0)).collect();
        let lambda: Vec<f64> = lower
            .multipliers
            .iter()
            .map(|l| (l + spread * rng.random_range(-1.0..1.0)).max(0.0))
            .collect();
        let pt = match DbpPoint::new(&p, x, y, lambda) {
            Ok(pt) => pt,
            Err(e) => return CheckResult::error(NAME, e),
        };
        let e2 = 10f64.powf(rng.random_range(-4.0..0.0));
        let m2 = 10f64.powf(rng.random_range(-6.0..-1.0));
        let e1 = e2 * 10f64.powf(rng.random_range(0.0..2.0));
        let m1 = m2 * 10f64.powf(rng.random_range(0.0..2.0));
        let member = |eps: f64, mu: f64| -> Result<bool, SolveError> {
            Ok(residuals_with(&p, &pt, FeasibilityTolerance::new(eps, mu)?, &inner)?.is_feasible(0.0))
        };
        match (member(e2, m2), member(e1, m1)) {
            (Ok(inner_member), Ok(outer_member)) => {
                tested += 1;
                if inner_member {
                    members += 1;
                    if !outer_member {
                        violations += 1;
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(NAME, e),
        }
    }
    CheckResult::bound(
        NAME,
        violations as f64,
        0.0,
        format!("{violations} violations; {members} of {tested} points in the smaller set"),
    )
}

/// On `min { c y | y in [-1, 1] }` the grid-enumerated eps-solutions and the
/// points certified by the dual gap agree up to one grid step, for several
/// `c` and `eps in {0.01, 0.1, 1}`.
pub fn epsilon_solution_sets() -> CheckResult {
    const NAME: &str = "epsilon_solution_sets";
    const STEP: f64 = 1e-3;
    let mut worst = 0usize;
    let mut total = 0usize;
    for offset in [0.7, -0.4, 0.05] {
        let p = interval_lp(offset);
        let c = offset;
        let feasible = match GridSpec::line(-1.0, 1.0, STEP) {
            Ok(g) => g,
            Err(e) => return CheckResult::error(NAME, e),
        };
        let (_, vstar) = grid_minimize(|y| c * y[0], &feasible);
        let dual = match maximize_dual(&p, &[0.0], 1e-9, &AscentOptions::default()) {
            Ok(m) => m,
            Err(e) => return CheckResult::error(NAME, e),
        };
        for eps in [0.01, 0.1, 1.0] {
            let mut mismatches = 0;
            let n = (3.0 / STEP).round() as usize;
            for i in 0..=n {
                let y = -1.5 + i as f64 * STEP;
                let g_ok = (-y - 1.0).max(y - 1.0) <= eps;
                let enumerated = g_ok && c * y - vstar <= eps;
                let certified = g_ok && c * y - dual.value <= eps;
                if enumerated != certified {
                    // only allowed where the enumerated set changes within one step
                    let near = (c * y - vstar - eps).abs() <= c.abs() * STEP + 1e-9;
                    if !near {
                        mismatches += 1;
                    }
                }
            }
            total += n + 1;
            worst = worst.max(mismatches);
        }
    }
    CheckResult::bound(
        NAME,
        worst as f64,
        0.0,
        format!("{worst} grid points disagree beyond one step (of {total} probed)"),
    )
}

/// `h_mu` is non-decreasing in `mu` over `{0, 1e-6, 1e-4, 1e-2, 1}`.
pub fn mu_monotonicity(seed: u64) -> CheckResult {
    const NAME: &str = "mu_monotonicity";
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6e6f);
    let mus = [0.0, 1e-6, 1e-4, 1e-2, 1.0];
    let mut violations = 0;
    let mut worst_drop: f64 = 0.0;
    for _ in 0..100 {
        let strict = rng.random_bool(0.5);
        let p = random_quadratic(&mut rng, strict);
        let x: Vec<f64> = (0..p.x_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda: Vec<f64> = (0..p.constraint_count()).map(|_| rng.random_range(0.0..2.0)).collect();
        let mut prev = f64::NEG_INFINITY;
        for mu in mus {
            let h = match eval_rdf(&p, &x, &lambda, mu) {
                Ok(d) => d.value,
                Err(e) => return CheckResult::error(NAME, e),
            };
            if h < prev - 1e-10 {
                violations += 1;
                worst_drop = worst_drop.max(prev - h);
            }
            prev = h;
        }
    }
    CheckResult::bound(
        NAME,
        violations as f64,
        0.0,
        format!("{violations} decreases beyond 1e-10 (largest {worst_drop:.3e})"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let s = run_all(&CheckOptions::default());
        for c in &s.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(s.passed);
    }

    #[test]
    fn injected_bug_is_caught() {
        let c = rdf_gradients(7, true);
        assert!(!c.passed, "{}", c.detail);
        assert_eq!(c.name, "rdf_gradients");
    }
}
