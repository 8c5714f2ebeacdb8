//! Partitioned quasi-Newton minimization over a box.
//!
//! For objectives that are sums of element functions, each depending on a few
//! of the variables, one damped BFGS model is kept per element and the models
//! are assembled into the search direction. Variables owned by a single
//! element are eliminated element by element (Schur complement) before the
//! remaining dense system over the shared variables is factored, so elements
//! with many private variables stay cheap.
//!
//! The active-set handling and the weak Wolfe search along the projected path
//! are the same as in [`crate::qn::minimize_box`].

use nalgebra::{DMatrix, DVector};

use crate::error::SolveError;
use crate::qn::{projected_gradient_norm, wolfe_search, QnOptions, QnStatus, StallMonitor};

#[derive(Debug, Clone)]
pub struct PartitionedResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub pg_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: QnStatus,
    /// Element Hessian models, usable as a warm start.
    pub element_models: Vec<DMatrix<f64>>,
}

struct Structure<'a> {
    elements: &'a [Vec<usize>],
    /// Number of elements each variable appears in.
    owners: Vec<usize>,
}

impl Structure<'_> {
    fn gather(&self, grads: &[Vec<f64>], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (vars, ge) in self.elements.iter().zip(grads) {
            for (&i, &gi) in vars.iter().zip(ge) {
                out[i] += gi;
            }
        }
    }

    /// Solves `(sum_e U_e B_e U_e') d = -g` over the free variables; fixed
    /// variables get `d = 0`. `None` if the assembled system is not positive
    /// definite even after regularization.
    fn direction(&self, models: &[DMatrix<f64>], g: &[f64], fixed: &[bool]) -> Option<Vec<f64>> {
        let n = g.len();
        let mut shared_index = vec![usize::MAX; n];
        let mut shared = Vec::new();
        for i in 0..n {
            if !fixed[i] && self.owners[i] != 1 {
                shared_index[i] = shared.len();
                shared.push(i);
            }
        }
        let ns = shared.len();
        let mut s = DMatrix::<f64>::zeros(ns, ns);
        let mut r = DVector::from_iterator(ns, shared.iter().map(|&i| g[i]));
        let scale = models
            .iter()
            .flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let floor = 1e-10 * scale;

        struct Private {
            vars: Vec<usize>,
            shared_cols: Vec<usize>,
            dinv_ct: DMatrix<f64>,
            dinv_gp: DVector<f64>,
        }
        let mut privates = Vec::new();
        for (vars, b) in self.elements.iter().zip(models) {
            let mut ls = Vec::new();
            let mut lp = Vec::new();
            for (k, &i) in vars.iter().enumerate() {
                if fixed[i] {
                    continue;
                }
                if self.owners[i] == 1 {
                    lp.push(k);
                } else {
                    ls.push(k);
                }
            }
            for &a in &ls {
                for &c in &ls {
                    s[(shared_index[vars[a]], shared_index[vars[c]])] += b[(a, c)];
                }
            }
            if lp.is_empty() {
                continue;
            }
            let mut d = DMatrix::from_fn(lp.len(), lp.len(), |a, c| b[(lp[a], lp[c])]);
            for k in 0..lp.len() {
                d[(k, k)] += floor;
            }
            let chol = d.cholesky()?;
            let ct = DMatrix::from_fn(lp.len(), ls.len(), |a, c| b[(lp[a], ls[c])]);
            let dinv_ct = chol.solve(&ct);
            let gp = DVector::from_iterator(lp.len(), lp.iter().map(|&k| g[vars[k]]));
            let dinv_gp = chol.solve(&gp);
            // S -= C D^-1 C',  r -= C D^-1 g_P  with C = ct'
            for (a, &ka) in ls.iter().enumerate() {
                let ia = shared_index[vars[ka]];
                let mut acc = 0.0;
                for p in 0..lp.len() {
                    acc += ct[(p, a)] * dinv_gp[p];
                }
                r[ia] -= acc;
                for (c, &kc) in ls.iter().enumerate() {
                    let mut acc = 0.0;
                    for p in 0..lp.len() {
                        acc += ct[(p, a)] * dinv_ct[(p, c)];
                    }
                    s[(ia, shared_index[vars[kc]])] -= acc;
                }
            }
            privates.push(Private {
                vars: lp.iter().map(|&k| vars[k]).collect(),
                shared_cols: ls.iter().map(|&k| shared_index[vars[k]]).collect(),
                dinv_ct,
                dinv_gp,
            });
        }

        let mut ds = None;
        let mut shift = floor;
        for _ in 0..12 {
            let mut m = s.clone();
            for k in 0..ns {
                m[(k, k)] += shift;
            }
            if let Some(chol) = m.cholesky() {
                ds = Some(chol.solve(&r).map(|v| -v));
                break;
            }
            shift *= 100.0;
        }
        let ds = ds?;
        let mut d = vec![0.0; n];
        for (k, &i) in shared.iter().enumerate() {
            d[i] = ds[k];
        }
        for pv in privates {
            let dsl = DVector::from_iterator(pv.shared_cols.len(), pv.shared_cols.iter().map(|&c| ds[c]));
            let dp = -(pv.dinv_gp + pv.dinv_ct * dsl);
            for (k, &i) in pv.vars.iter().enumerate() {
                d[i] = dp[k];
            }
        }
        d.iter().all(|v| v.is_finite()).then_some(d)
    }
}

/// Damped BFGS update of a direct Hessian model (Powell's modification keeps
/// it positive definite when `s'y` is small or negative).
fn damped_update(b: &mut DMatrix<f64>, s: &[f64], y: &[f64]) {
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let bs = &*b * &s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(&y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = &y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if !(sr > 0.0) || !sr.is_finite() {
        return;
    }
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    b.ger(1.0 / sr, &r, &r, 1.0);
}

/// Minimizes `sum_e f_e(x[elements[e]])` over `lower <= x <= upper`.
///
/// `f(x, grads)` returns the total value and writes each element's gradient
/// (in the order of `elements[e]`) into `grads[e]`; the gradients are ignored
/// when the value is not finite.
pub fn minimize_partitioned<F>(
    f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    elements: &[Vec<usize>],
    opts: &QnOptions,
    warm_start: Option<Vec<DMatrix<f64>>>,
) -> Result<PartitionedResult, SolveError>
where
    F: FnMut(&[f64], &mut [Vec<f64>]) -> f64,
{
    minimize_elements(f, x0, lower, upper, elements, opts, Curvature::Bfgs(warm_start))
}

/// Element Hessians supplied by the caller: `hess(x, grads, models)` fills
/// `models[e]` at `x` (where the element gradients are `grads`) and returns
/// the number of objective evaluations it spent. The matrices are symmetrized
/// and their eigenvalues floored to make each element model positive definite.
pub type HessianFn<'a> = dyn FnMut(&[f64], &[Vec<f64>], &mut [DMatrix<f64>]) -> usize + 'a;

/// Same as [`minimize_partitioned`] with Newton element models from `hess`.
pub fn minimize_partitioned_newton<F>(
    f: F,
    hess: &mut HessianFn<'_>,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    elements: &[Vec<usize>],
    opts: &QnOptions,
) -> Result<PartitionedResult, SolveError>
where
    F: FnMut(&[f64], &mut [Vec<f64>]) -> f64,
{
    minimize_elements(f, x0, lower, upper, elements, opts, Curvature::Supplied(hess))
}

enum Curvature<'h, 'a> {
    Bfgs(Option<Vec<DMatrix<f64>>>),
    Supplied(&'h mut HessianFn<'a>),
}

/// Symmetric part of `m` with eigenvalues replaced by `max(|lambda|, floor)`.
fn make_positive_definite(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return;
    }
    let sym = (&*m + m.transpose()) * 0.5;
    let scale = sym.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-8 * scale.max(1e-4);
    let mut shifted = sym.clone();
    for k in 0..n {
        shifted[(k, k)] += floor;
    }
    if shifted.clone().cholesky().is_some() {
        *m = shifted;
        return;
    }
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.abs().max(floor));
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
}

fn minimize_elements<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    elements: &[Vec<usize>],
    opts: &QnOptions,
    mut curvature: Curvature<'_, '_>,
) -> Result<PartitionedResult, SolveError>
where
    F: FnMut(&[f64], &mut [Vec<f64>]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    let mut owners = vec![0; n];
    for vars in elements {
        for &i in vars {
            assert!(i < n, "element variable {i} out of range");
            owners[i] += 1;
        }
    }
    let structure = Structure { elements, owners };
    let fresh_grads = || elements.iter().map(|v| vec![0.0; v.len()]).collect::<Vec<_>>();

    let mut x: Vec<f64> = x0.iter().zip(lower.iter().zip(upper)).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect();
    let mut eg = fresh_grads();
    let mut fx = f(&x, &mut eg);
    let mut g = vec![0.0; n];
    structure.gather(&eg, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFiniteStart);
    }

    let warm_start = match &mut curvature {
        Curvature::Bfgs(w) => w.take(),
        Curvature::Supplied(_) => None,
    };
    let (mut models, mut fresh) = match warm_start {
        Some(m)
            if m.len() == elements.len()
                && m.iter().zip(elements).all(|(b, v)| b.nrows() == v.len() && b.ncols() == v.len()) =>
        {
            (m, false)
        }
        _ => (elements.iter().map(|v| DMatrix::identity(v.len(), v.len())).collect(), true),
    };

    let mut fixed = vec![false; n];
    let mut stall = StallMonitor::new(opts);
    let mut status = QnStatus::MaxIter;
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
            fixed[i] = (x[i] <= lower[i] + eps_active && g[i] > 0.0) || (x[i] >= upper[i] - eps_active && g[i] < 0.0);
        }

        if let Curvature::Supplied(hess) = &mut curvature {
            evaluations += hess(&x, &eg, &mut models);
            models.iter_mut().for_each(make_positive_definite);
            fresh = false;
        }

        let mut accepted = false;
        for attempt in 0..2 {
            let model_step = attempt == 0 && !fresh;
            let mut d = if model_step {
                match structure.direction(&models, &g, &fixed) {
                    Some(d) => d,
                    None => continue,
                }
            } else {
                g.iter().zip(&fixed).map(|(gi, &fx)| if fx { 0.0 } else { -gi }).collect()
            };
            for i in 0..n {
                if fixed[i] {
                    d[i] = 0.0;
                }
            }
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            if !(gd < 0.0) {
                continue;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let alpha = if model_step { 1.0 } else { 1.0 / dmax };
            let (trial, used) = wolfe_search(
                |z: &[f64]| {
                    let mut ez = fresh_grads();
                    let fz = f(z, &mut ez);
                    let mut gz = vec![0.0; n];
                    structure.gather(&ez, &mut gz);
                    (fz, gz, ez)
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
            let Some(t) = trial else {
                if model_step {
                    // the models led nowhere: start them over
                    fresh = true;
                }
                continue;
            };
            let step: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let secant = matches!(curvature, Curvature::Bfgs(_));
            for (e, vars) in elements.iter().enumerate().filter(|_| secant) {
                let se: Vec<f64> = vars.iter().map(|&i| step[i]).collect();
                if se.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let ye: Vec<f64> = t.extra[e].iter().zip(&eg[e]).map(|(a, b)| a - b).collect();
                if fresh {
                    let sy: f64 = se.iter().zip(&ye).map(|(a, b)| a * b).sum();
                    let yy: f64 = ye.iter().map(|v| v * v).sum();
                    let ss: f64 = se.iter().map(|v| v * v).sum();
                    let sigma = if sy > 1e-12 * (ss * yy).sqrt() && sy > 0.0 { yy / sy } else { (yy / ss).sqrt().max(1e-8) };
                    models[e] = DMatrix::identity(vars.len(), vars.len()) * sigma;
                }
                damped_update(&mut models[e], &se, &ye);
            }
            fresh = false;
            x = t.x;
            g = t.grad;
            eg = t.extra;
            fx = t.value;
            accepted = true;
            break;
        }
        if !accepted {
            status = QnStatus::Stalled;
            break;
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
    Ok(PartitionedResult {
        x,
        value: fx,
        grad: g,
        pg_norm: pg,
        iterations,
        evaluations,
        status,
        element_models: models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `sum_i w_i (x_0 - x_i - c_i)^2`: one element per `i`, all sharing `x_0`.
    fn arrow(c: &[f64], w: &[f64]) -> (Vec<Vec<usize>>, impl FnMut(&[f64], &mut [Vec<f64>]) -> f64) {
        let elements: Vec<Vec<usize>> = (1..=c.len()).map(|i| vec![0, i]).collect();
        let (c, w) = (c.to_vec(), w.to_vec());
        let f = move |x: &[f64], grads: &mut [Vec<f64>]| {
            let mut v = 0.0;
            for i in 0..c.len() {
                let r = x[0] - x[i + 1] - c[i];
                v += w[i] * r * r;
                grads[i][0] = 2.0 * w[i] * r;
                grads[i][1] = -2.0 * w[i] * r;
            }
            v
        };
        (elements, f)
    }

    #[test]
    fn separable_sum_with_shared_variable() {
        // plus a pull of x_0 towards 1 so the minimizer is unique
        let c = [0.5, -1.0, 2.0];
        let w = [1.0, 10.0, 0.1];
        let (mut elements, mut inner) = arrow(&c, &w);
        elements.push(vec![0]);
        let f = move |x: &[f64], grads: &mut [Vec<f64>]| {
            let v = inner(x, &mut grads[..3]);
            grads[3][0] = 2.0 * (x[0] - 1.0);
            v + (x[0] - 1.0).powi(2)
        };
        let inf = [f64::INFINITY; 4];
        let r = minimize_partitioned(f, &[0.0; 4], &[f64::NEG_INFINITY; 4], &inf, &elements, &QnOptions::default(), None).unwrap();
        assert_eq!(r.status, QnStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7);
        for i in 0..3 {
            assert!((r.x[i + 1] - (1.0 - c[i])).abs() < 1e-7, "{:?}", r.x);
        }
    }

    #[test]
    fn bounds_on_private_variables() {
        let (mut elements, mut inner) = arrow(&[0.5, -1.0], &[1.0, 1.0]);
        elements.push(vec![0]);
        let f = move |x: &[f64], grads: &mut [Vec<f64>]| {
            let v = inner(x, &mut grads[..2]);
            grads[2][0] = 2.0 * x[0];
            v + x[0] * x[0]
        };
        // unconstrained minimizer x = (0, -0.5, 1); the box caps x_2 at 0.25
        let r = minimize_partitioned(
            f,
            &[0.3, 0.0, 0.0],
            &[-1.0, -1.0, -1.0],
            &[1.0, 1.0, 0.25],
            &elements,
            &QnOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(r.status, QnStatus::Converged);
        assert_eq!(r.x[2], 0.25);
        // x_0 balances x_0^2 + (x_0 - x_1 - 0.5)^2 + (x_0 - 0.25 + 1)^2 with x_1 free
        assert!((r.x[0] - (-0.375)).abs() < 1e-6, "{:?}", r.x);
        assert!((r.x[1] - (r.x[0] - 0.5)).abs() < 1e-6);
    }

    #[test]
    fn damped_update_stays_positive_definite() {
        let mut b = DMatrix::identity(2, 2);
        damped_update(&mut b, &[1.0, 0.0], &[-3.0, 1.0]);
        assert!(b.clone().cholesky().is_some(), "{b}");
        let mut b = DMatrix::identity(2, 2);
        damped_update(&mut b, &[1.0, 1.0], &[2.0, 2.0]);
        let bs = &b * DVector::from_column_slice(&[1.0, 1.0]);
        assert!((bs[0] - 2.0).abs() < 1e-12 && (bs[1] - 2.0).abs() < 1e-12);
    }
}
