//! Brute-force and closed-form reference computations.
//!
//! Nothing here shares code paths with the solvers it is used to check: grid
//! scans are exhaustive, the LP dual is the textbook closed form and gradients
//! are central differences.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Largest grid [`grid_minimize`] will scan.
pub const MAX_GRID_POINTS: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("grid has {0} points, above the cap of {MAX_GRID_POINTS}")]
    GridTooLarge(u64),
    #[error("invalid grid axis {axis}: [{lower}, {upper}] with step {step}")]
    InvalidAxis {
        axis: usize,
        lower: f64,
        upper: f64,
        step: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn new(lower: f64, upper: f64, step: f64) -> Self {
        Self { lower, upper, step }
    }

    fn len(&self) -> u64 {
        ((self.upper - self.lower) / self.step + 1e-9).floor() as u64 + 1
    }

    fn point(&self, k: u64) -> f64 {
        (self.lower + k as f64 * self.step).min(self.upper)
    }
}

/// Tensor grid, one axis per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self, OracleError> {
        for (axis, a) in axes.iter().enumerate() {
            if !(a.step > 0.0) || !a.lower.is_finite() || !a.upper.is_finite() || a.lower > a.upper {
                return Err(OracleError::InvalidAxis {
                    axis,
                    lower: a.lower,
                    upper: a.upper,
                    step: a.step,
                });
            }
        }
        let spec = Self { axes };
        let n = spec.size();
        if n > MAX_GRID_POINTS {
            return Err(OracleError::GridTooLarge(n));
        }
        Ok(spec)
    }

    pub fn line(lower: f64, upper: f64, step: f64) -> Result<Self, OracleError> {
        Self::new(vec![GridAxis::new(lower, upper, step)])
    }

    pub fn size(&self) -> u64 {
        self.axes
            .iter()
            .map(GridAxis::len)
            .fold(1u64, |acc, n| acc.saturating_mul(n))
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Visits every grid point in lexicographic order (first axis slowest).
    pub fn for_each(&self, mut visit: impl FnMut(&[f64])) {
        let lens: Vec<u64> = self.axes.iter().map(GridAxis::len).collect();
        let mut idx = vec![0u64; self.dim()];
        let mut point: Vec<f64> = self.axes.iter().map(|a| a.point(0)).collect();
        loop {
            visit(&point);
            let mut d = self.dim();
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < lens[d] {
                    point[d] = self.axes[d].point(idx[d]);
                    break;
                }
                idx[d] = 0;
                point[d] = self.axes[d].point(0);
            }
        }
    }
}

/// Exhaustive scan. Ties keep the first point in lexicographic order;
/// non-finite values are never selected.
pub fn grid_minimize(f: impl Fn(&[f64]) -> f64, grid: &GridSpec) -> (Vec<f64>, f64) {
    let mut best_point = Vec::new();
    let mut best = f64::INFINITY;
    grid.for_each(|p| {
        let v = f(p);
        if v < best || best_point.is_empty() && v == best {
            best = v;
            best_point = p.to_vec();
        }
    });
    (best_point, best)
}

/// Value in `R ∪ {-inf}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    NegInfinity,
    Finite(f64),
}

impl ExtendedReal {
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::NegInfinity => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        use ExtendedReal::*;
        match (self, other) {
            (NegInfinity, NegInfinity) => Some(Ordering::Equal),
            (NegInfinity, Finite(_)) => Some(Ordering::Less),
            (Finite(_), NegInfinity) => Some(Ordering::Greater),
            (Finite(a), Finite(b)) => a.partial_cmp(b),
        }
    }
}

/// Lagrangian dual of `min { c'y | Ay - b <= 0 }`:
/// `-b'λ` on `{A'λ = -c, λ >= 0}`, `-inf` elsewhere. Membership in the domain
/// is decided with tolerance `tol`.
pub fn lp_ldf_closed_form(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
    lambda: &DVector<f64>,
    tol: f64,
) -> ExtendedReal {
    assert_eq!(a.nrows(), b.len(), "A rows must match b");
    assert_eq!(a.ncols(), c.len(), "A cols must match c");
    assert_eq!(a.nrows(), lambda.len(), "A rows must match lambda");
    if lambda.iter().any(|&l| l < -tol) {
        return ExtendedReal::NegInfinity;
    }
    let residual = a.transpose() * lambda + c;
    if residual.amax() > tol {
        return ExtendedReal::NegInfinity;
    }
    ExtendedReal::Finite(-b.dot(lambda))
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0);
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            probe[i] = point[i] + step;
            let up = f(&probe);
            probe[i] = point[i] - step;
            let down = f(&probe);
            probe[i] = point[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_minimize_monotone_line() {
        let grid = GridSpec::line(-2.0, 2.0, 1e-3).unwrap();
        assert_eq!(grid.size(), 4001);
        let (p, v) = grid_minimize(|y| y[0], &grid);
        assert_eq!(p, vec![-2.0]);
        assert_eq!(v, -2.0);
    }

    #[test]
    fn grid_minimize_parabola_vertex() {
        let grid = GridSpec::line(-1.0, 1.0, 1e-4).unwrap();
        let (p, _) = grid_minimize(|y| (y[0] - 0.3).powi(2), &grid);
        assert!((p[0] - 0.3).abs() <= 1e-4);
    }

    #[test]
    fn grid_minimize_example_lagrangian() {
        // y + (y - 1) over [-2, 2], i.e. lambda = (0, 1) in the two-sided example.
        let grid = GridSpec::line(-2.0, 2.0, 1e-3).unwrap();
        let (p, v) = grid_minimize(|y| y[0] + (y[0] - 1.0), &grid);
        assert_eq!(p, vec![-2.0]);
        assert_abs_diff_eq!(v, -5.0, epsilon = 1e-12);
        let closed = -2.0 * (1.0f64 - 0.0 + 1.0).abs() - 0.0 - 1.0;
        assert_abs_diff_eq!(v, closed, epsilon = 1e-12);
    }

    #[test]
    fn grid_tie_break_is_lexicographic() {
        let grid = GridSpec::new(vec![GridAxis::new(0.0, 1.0, 0.5), GridAxis::new(0.0, 1.0, 0.5)]).unwrap();
        let mut order = Vec::new();
        grid.for_each(|p| order.push(p.to_vec()));
        assert_eq!(order.len(), 9);
        assert_eq!(order[1], vec![0.0, 0.5]);
        let (p, _) = grid_minimize(|_| 1.0, &grid);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn grid_size_cap() {
        let err = GridSpec::new(vec![GridAxis::new(0.0, 1.0, 1e-4); 2]).unwrap_err();
        assert!(matches!(err, OracleError::GridTooLarge(_)));
        assert!(GridSpec::line(0.0, 1.0, 0.0).is_err());
    }

    fn example_lp() -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        // -y - 1 <= 0, y - 1 <= 0, objective y
        (
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
    }

    #[test]
    fn lp_ldf_on_and_off_domain() {
        let (a, b, c) = example_lp();
        let at = |l1: f64, l2: f64| lp_ldf_closed_form(&a, &b, &c, &DVector::from_vec(vec![l1, l2]), 1e-12);
        assert_eq!(at(1.0, 0.0), ExtendedReal::Finite(-1.0));
        assert_eq!(at(0.0, 0.0), ExtendedReal::NegInfinity);
        assert_eq!(at(2.0, 1.0), ExtendedReal::Finite(-3.0));
        // agrees with the constrained dual -2|1 - l1 + l2| - l1 - l2 on the domain
        let h = -2.0 * (1.0f64 - 2.0 + 1.0).abs() - 3.0;
        assert_eq!(at(2.0, 1.0).finite(), Some(h));
        assert!(ExtendedReal::NegInfinity < ExtendedReal::Finite(-1e300));
    }

    #[test]
    fn finite_diff_basics() {
        let g = finite_diff_grad(|v| v.iter().map(|x| x * x).sum(), &[0.0, 0.0, 0.0], 1e-3);
        assert!(g.iter().all(|x| x.abs() <= 1e-6));
        let g = finite_diff_grad(|v| 3.0 * v[0] - 2.0 * v[1] + 0.5, &[0.7, -1.1], 1e-3);
        assert_abs_diff_eq!(g[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -2.0, epsilon = 1e-12);
    }
}
