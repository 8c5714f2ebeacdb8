//! Box-constrained quasi-Newton minimization.
//!
//! Projected BFGS on the inverse Hessian: variables sitting on a bound with the
//! gradient pushing outward are frozen for the step, the remaining ones follow
//! `-H g` (a unit max-norm step while no curvature is known), and the trial path `P(x + a d)` is searched by
//! bisection for a weak Wolfe point, which keeps the curvature pairs useful on
//! objectives with sharp bends.
//! Accepted steps never increase the objective. Objectives may return `+inf`
//! (or NaN) outside their domain; such trial points are rejected by the line
//! search, so the start point must lie in the domain.

use nalgebra::{DMatrix, DVector};

use crate::error::SolveError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QnOptions {
    /// Stop when `||P(x - grad) - x||_inf <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Stop (status `Stalled`) when the objective dropped by at most
    /// `stall_tol * (1 + |f|)` over the last `stall_window` iterations; a
    /// window of 0 disables the test.
    pub stall_window: usize,
    pub stall_tol: f64,
    pub record_values: bool,
}

impl Default for QnOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            armijo: 1e-4,
            max_backtracks: 80,
            stall_window: 0,
            stall_tol: 0.0,
            record_values: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QnStatus {
    Converged,
    MaxIter,
    /// No decrease found along the search path (typically round-off), or no
    /// significant decrease over the stall window.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct QnResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub pg_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: QnStatus,
    /// Objective after every accepted step (first entry is the start), when
    /// [`QnOptions::record_values`] is set.
    pub values: Vec<f64>,
    pub inverse_hessian: DMatrix<f64>,
}

pub(crate) struct StallMonitor {
    window: usize,
    tol: f64,
    values: std::collections::VecDeque<f64>,
}

impl StallMonitor {
    pub(crate) fn new(opts: &QnOptions) -> Self {
        Self {
            window: opts.stall_window,
            tol: opts.stall_tol,
            values: Default::default(),
        }
    }

    /// Records the objective after an accepted step; `true` once progress
    /// over the window is insignificant.
    pub(crate) fn push(&mut self, f: f64) -> bool {
        if self.window == 0 {
            return false;
        }
        self.values.push_back(f);
        if self.values.len() <= self.window {
            return false;
        }
        let old = self.values.pop_front().unwrap_or(f);
        old - f <= self.tol * (1.0 + f.abs())
    }
}

/// `||P(x - g) - x||_inf` for the box `[lower, upper]`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| ((xi - gi).clamp(lo, hi) - xi).abs())
        .fold(0.0, f64::max)
}

fn project(v: &mut [f64], lower: &[f64], upper: &[f64]) {
    for (vi, (&lo, &hi)) in v.iter_mut().zip(lower.iter().zip(upper)) {
        *vi = vi.clamp(lo, hi);
    }
}

const WOLFE_CURVATURE: f64 = 0.9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over `lower <= x <= upper` (bounds may be infinite).
///
/// `f(x, grad)` returns the value and writes the gradient into `grad`; the
/// gradient is ignored when the value is not finite. `warm_start` seeds the
/// inverse Hessian approximation.
pub fn minimize_box<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &QnOptions,
    warm_start: Option<DMatrix<f64>>,
) -> Result<QnResult, SolveError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);

    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFiniteStart);
    }

    let (mut h, mut fresh) = match warm_start {
        Some(h) if h.nrows() == n && h.ncols() == n => (h, false),
        _ => (DMatrix::identity(n, n), true),
    };
    let mut values = Vec::new();
    if opts.record_values {
        values.push(fx);
    }

    let mut ghat = DVector::zeros(n);
    let mut active = vec![false; n];
    let mut status = QnStatus::MaxIter;
    let mut stall = StallMonitor::new(opts);
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(&x, &g, lower, upper);

    while iterations < opts.max_iter {
        if pg <= opts.tol {
            status = QnStatus::Converged;
            break;
        }
        iterations += 1;

        let eps_active = pg.min(1e-6);
        for i in 0..n {
            active[i] = (x[i] <= lower[i] + eps_active && g[i] > 0.0)
                || (x[i] >= upper[i] - eps_active && g[i] < 0.0);
            ghat[i] = if active[i] { 0.0 } else { g[i] };
        }

        let mut accepted = false;
        for attempt in 0..2 {
            let mut d: Vec<f64> = if attempt == 0 && !fresh {
                (&h * &ghat).iter().map(|v| -v).collect()
            } else {
                ghat.iter().map(|v| -v).collect()
            };
            for i in 0..n {
                if active[i] {
                    d[i] = 0.0;
                }
            }
            let gd = dot(&g, &d);
            if !(gd < 0.0) {
                if attempt == 0 {
                    continue;
                }
                break;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // without curvature information, try a unit step in the max-norm
            let alpha = if fresh || attempt == 1 { 1.0 / dmax } else { 1.0 };

            let (trial, used) = wolfe_search(
                |z: &[f64]| {
                    let mut gz = vec![0.0; n];
                    let fz = f(z, &mut gz);
                    (fz, gz, ())
                },
                &x,
                fx,
                &g,
                &d,
                alpha,
                lower,
                upper,
                opts,
            );
            evaluations += used;
            if let Some(t) = trial {
                let step: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                // frozen coordinates did not move; their gradient change says
                // nothing about the curvature along the step
                let yv: Vec<f64> = t
                    .grad
                    .iter()
                    .zip(&g)
                    .zip(&active)
                    .map(|((a, b), &frozen)| if frozen { 0.0 } else { a - b })
                    .collect();
                let sy = dot(&step, &yv);
                let yy = dot(&yv, &yv);
                let ss = dot(&step, &step);
                if sy > 1e-12 * (ss * yy).sqrt() && sy > 0.0 {
                    if fresh {
                        h = DMatrix::identity(n, n) * (sy / yy);
                        fresh = false;
                    }
                    bfgs_inverse_update(&mut h, &step, &yv, sy);
                }
                x = t.x;
                g = t.grad;
                fx = t.value;
                accepted = true;
            }
            if accepted {
                break;
            }
            // curvature model led nowhere: fall back to steepest descent once
            if !fresh {
                h = DMatrix::identity(n, n);
                fresh = true;
            }
        }

        if !accepted {
            status = QnStatus::Stalled;
            break;
        }
        if opts.record_values {
            values.push(fx);
        }
        pg = projected_gradient_norm(&x, &g, lower, upper);
        if stall.push(fx) {
            status = QnStatus::Stalled;
            break;
        }
    }
    if status == QnStatus::MaxIter && pg <= opts.tol {
        status = QnStatus::Converged;
    }

    Ok(QnResult {
        x,
        value: fx,
        grad: g,
        pg_norm: pg,
        iterations,
        evaluations,
        status,
        values,
        inverse_hessian: h,
    })
}

/// Accepted point of a line search, with whatever the objective computed
/// alongside its gradient.
pub(crate) struct Trial<S> {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub extra: S,
}

/// Weak Wolfe bisection along the projected path `P(x + a d)` starting at
/// `alpha`. A point that only passes the decrease test is kept as a fallback;
/// the best such point is returned. Also returns the number of evaluations.
#[allow(clippy::too_many_arguments)]
pub(crate) fn wolfe_search<S, F>(
    mut eval: F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    mut alpha: f64,
    lower: &[f64],
    upper: &[f64],
    opts: &QnOptions,
) -> (Option<Trial<S>>, usize)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, S),
{
    let n = x.len();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut best: Option<Trial<S>> = None;
    let mut last_step: Option<Vec<f64>> = None;
    let mut evaluations = 0;
    let mut xt = vec![0.0; n];
    for _ in 0..opts.max_backtracks {
        for i in 0..n {
            xt[i] = (x[i] + alpha * d[i]).clamp(lower[i], upper[i]);
        }
        let step: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
        if step.iter().all(|&s| s == 0.0) {
            break;
        }
        if last_step.as_ref() == Some(&step) {
            // every free coordinate is clamped: longer steps change nothing
            break;
        }
        let (ft, gt, extra) = eval(&xt);
        evaluations += 1;
        let decrease = dot(g, &step).min(0.0);
        let sufficient = ft.is_finite()
            && gt.iter().all(|v| v.is_finite())
            && ft <= fx + opts.armijo * decrease
            && ft <= fx;
        if !sufficient {
            hi = alpha;
            alpha = 0.5 * (lo + hi);
            continue;
        }
        let curvature_ok = dot(&gt, &step) >= WOLFE_CURVATURE * decrease;
        if best.as_ref().is_none_or(|b| ft < b.value) {
            best = Some(Trial {
                x: xt.clone(),
                value: ft,
                grad: gt,
                extra,
            });
        }
        if curvature_ok {
            break;
        }
        lo = alpha;
        last_step = Some(step);
        alpha = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * alpha };
    }
    (best, evaluations)
}

fn bfgs_inverse_update(h: &mut DMatrix<f64>, s: &[f64], y: &[f64], sy: f64) {
    let rho = 1.0 / sy;
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let hy = &*h * &y;
    let yhy = y.dot(&hy);
    h.ger(-rho, &s, &hy, 1.0);
    h.ger(-rho, &hy, &s, 1.0);
    h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
}
