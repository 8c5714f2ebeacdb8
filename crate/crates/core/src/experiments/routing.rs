//! Stackelberg routing on two parallel edges.
//!
//! A total flow `phi < 1` crosses a top edge with unit delay and a bottom edge
//! with delay `(1 - phi) / (1 - t)` at bottom flow `t`. The leader routes
//! `alpha phi` as `x = (x_top, x_bottom)`; followers route the remaining
//! `(1 - alpha) phi` as `y` at a Nash equilibrium, i.e. minimizing the potential
//! `x1 + y1 - (1 - phi) log(1 - x2 - y2)`. The leader minimizes the total delay
//! `x1 + y1 + (1 - phi)(x2 + y2) / (1 - x2 - y2)`.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::error::SolveError;
use crate::homotopy::{run, DriverConfig, DriverOptions, Schedule};
use crate::inner::{solve_lower, InnerOptions, InnerStatus};
use crate::problem::{BilevelProblem, BoxSet, SmoothScalarFn, SmoothVectorFn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingInstance {
    pub alpha: f64,
    pub phi: f64,
}

impl RoutingInstance {
    pub fn new(alpha: f64, phi: f64) -> Result<Self, ExperimentError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ExperimentError::InvalidInstance(format!("alpha must lie in [0, 1] (got {alpha})")));
        }
        if !(phi > 0.0 && phi < 1.0) {
            return Err(ExperimentError::InvalidInstance(format!("phi must lie in (0, 1) (got {phi})")));
        }
        Ok(Self { alpha, phi })
    }

    pub fn leader_flow(&self) -> f64 {
        self.alpha * self.phi
    }

    pub fn follower_flow(&self) -> f64 {
        (1.0 - self.alpha) * self.phi
    }

    /// Average delay of the combined flow; `+inf` once the bottom edge saturates.
    pub fn delay(&self, x: &[f64], y: &[f64]) -> f64 {
        total_delay(self.phi, x[0] + y[0], x[1] + y[1])
    }
}

fn total_delay(phi: f64, top: f64, bottom: f64) -> f64 {
    if bottom >= 1.0 {
        return f64::INFINITY;
    }
    top + (1.0 - phi) * bottom / (1.0 - bottom)
}

pub fn build_stackelberg_blp(inst: &RoutingInstance) -> Result<BilevelProblem, ExperimentError> {
    let inst = RoutingInstance::new(inst.alpha, inst.phi)?;
    let phi = inst.phi;
    let c = 1.0 - phi;
    let lead = inst.leader_flow();
    let follow = inst.follower_flow();

    // d/dt of t (1-phi)/(1-t) is (1-phi)/(1-t)^2
    let upper = SmoothScalarFn::new(
        "total_delay",
        2,
        2,
        move |x, y| total_delay(phi, x[0] + y[0], x[1] + y[1]),
        move |x, y| vec![1.0, c / (1.0 - x[1] - y[1]).powi(2)],
        move |x, y| vec![1.0, c / (1.0 - x[1] - y[1]).powi(2)],
    );
    let upper_constraints = SmoothVectorFn::new(
        "leader_flow_balance",
        2,
        0,
        2,
        move |x, _| vec![x[0] + x[1] - lead, lead - x[0] - x[1]],
        |_, _| DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]),
        |_, _| DMatrix::zeros(2, 0),
    );
    let potential = SmoothScalarFn::new(
        "follower_potential",
        2,
        2,
        move |x, y| {
            let slack = 1.0 - x[1] - y[1];
            if slack <= 0.0 {
                return f64::INFINITY;
            }
            x[0] + y[0] - c * slack.ln()
        },
        move |x, y| vec![1.0, c / (1.0 - x[1] - y[1])],
        move |x, y| vec![1.0, c / (1.0 - x[1] - y[1])],
    );
    let follower_constraints = SmoothVectorFn::new(
        "follower_flow",
        2,
        2,
        4,
        move |_, y| vec![-y[0], -y[1], y[0] + y[1] - follow, follow - y[0] - y[1]],
        |_, _| DMatrix::zeros(4, 2),
        |_, _| DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0, -1.0, -1.0]),
    )
    .with_equality_pair(2, 3)?;

    let p = BilevelProblem::new(
        upper,
        upper_constraints,
        potential,
        follower_constraints,
        BoxSet::uniform(2, -1.0, 2.0)?,
    )?
    .with_x_box(BoxSet::uniform(2, 0.0, lead)?)?
    // follower flows are nonnegative as hard bounds in the reformulation
    .with_dbp_y_box(BoxSet::uniform(2, 0.0, 2.0)?)?;
    Ok(p)
}

/// Golden-section search for a unimodal function on `[lo, hi]`, down to a
/// bracket of width `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    let mid = 0.5 * (lo + hi);
    [lo, mid, hi]
        .into_iter()
        .min_by(|&p, &q| f(p).total_cmp(&f(q)))
        .unwrap_or(mid)
}

/// `argmin { x1 + (1 - phi) x2 / (1 - x2) | x1 + x2 = phi, x >= 0 }`, the
/// system optimum when one controller routes all the flow.
pub fn social_optimum(phi: f64, tol: f64) -> [f64; 2] {
    let x2 = golden_section(|t| total_delay(phi, phi - t, t), 0.0, phi, tol);
    [phi - x2, x2]
}

/// Delay of the system optimum (the price-of-anarchy denominator).
pub fn optimal_delay(phi: f64, tol: f64) -> f64 {
    let x = social_optimum(phi, tol);
    total_delay(phi, x[0], x[1])
}

/// The leader scales the full-flow system optimum by `alpha`.
pub fn scale_strategy(inst: &RoutingInstance, tol: f64) -> Vec<f64> {
    social_optimum(inst.phi, tol).iter().map(|v| inst.alpha * v).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoaEval {
    pub poa: f64,
    pub delay: f64,
    pub delay_opt: f64,
    pub follower_flow: Vec<f64>,
}

/// Delay of `leader_x` with the followers' Nash response, divided by the
/// system-optimal delay.
pub fn price_of_anarchy(inst: &RoutingInstance, leader_x: &[f64], tol: f64) -> Result<PoaEval, ExperimentError> {
    let inst = RoutingInstance::new(inst.alpha, inst.phi)?;
    let sum_gap = (leader_x[0] + leader_x[1] - inst.leader_flow()).abs();
    if leader_x.len() != 2 || leader_x.iter().any(|&v| v < -tol) || sum_gap > tol.max(1e-6) {
        return Err(ExperimentError::InvalidInstance(format!(
            "leader flow {leader_x:?} does not route alpha * phi = {}",
            inst.leader_flow()
        )));
    }
    let p = build_stackelberg_blp(&inst)?;
    let nash = solve_lower(&p, leader_x, &InnerOptions::default())?;
    if nash.status == InnerStatus::Infeasible {
        return Err(SolveError::Infeasible {
            max_violation: nash.kkt_residual,
        }
        .into());
    }
    let delay = inst.delay(leader_x, &nash.y_star);
    let delay_opt = optimal_delay(inst.phi, tol);
    Ok(PoaEval {
        poa: delay / delay_opt,
        delay,
        delay_opt,
        follower_flow: nash.y_star,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackelbergRow {
    pub alpha: f64,
    pub phi: f64,
    pub poa_scale: f64,
    pub poa_dual: f64,
    pub delay_scale: f64,
    pub delay_dual: f64,
    pub delay_opt: f64,
    pub wall_ms: f64,
    pub status: String,
}

/// Tolerance for the one-dimensional searches behind SCALE and the PoA denominator.
pub const LINE_SEARCH_TOL: f64 = 1e-10;

/// Runs the continuation from the SCALE strategy and scores both strategies.
pub fn run_stackelberg_cell(alpha: f64, phi: f64, schedule: &Schedule, opts: &DriverOptions) -> StackelbergRow {
    let clock = Instant::now();
    let outcome = (|| -> Result<(PoaEval, PoaEval, usize), ExperimentError> {
        let inst = RoutingInstance::new(alpha, phi)?;
        let p = build_stackelberg_blp(&inst)?;
        let x_scale = scale_strategy(&inst, LINE_SEARCH_TOL);
        let scale = price_of_anarchy(&inst, &x_scale, LINE_SEARCH_TOL)?;
        let (x, report) = run(&p, &DriverConfig::new(x_scale, *schedule), opts)?;
        let dual = price_of_anarchy(&inst, &renormalize(&inst, &x), LINE_SEARCH_TOL)?;
        Ok((scale, dual, report.warnings.len()))
    })();
    let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok((scale, dual, warnings)) => StackelbergRow {
            alpha,
            phi,
            poa_scale: scale.poa,
            poa_dual: dual.poa,
            delay_scale: scale.delay,
            delay_dual: dual.delay,
            delay_opt: dual.delay_opt,
            wall_ms,
            status: if warnings == 0 {
                "ok".into()
            } else {
                format!("ok_with_warnings:{warnings}")
            },
        },
        Err(err) => StackelbergRow {
            alpha,
            phi,
            poa_scale: f64::NAN,
            poa_dual: f64::NAN,
            delay_scale: f64::NAN,
            delay_dual: f64::NAN,
            delay_opt: f64::NAN,
            wall_ms,
            status: format!("error: {err}"),
        },
    }
}

/// Removes the (constraint-tolerance sized) drift of the solver's leader flow
/// from `alpha phi`, keeping the split.
fn renormalize(inst: &RoutingInstance, x: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let s = x[0] + x[1];
    if s <= 0.0 {
        return vec![inst.leader_flow(), 0.0];
    }
    x.iter().map(|v| v * inst.leader_flow() / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{grid_minimize, GridSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn instance_validation() {
        assert!(RoutingInstance::new(0.5, 1.0).is_err());
        assert!(RoutingInstance::new(0.5, 0.0).is_err());
        assert!(RoutingInstance::new(1.5, 0.5).is_err());
        assert!(build_stackelberg_blp(&RoutingInstance { alpha: 0.5, phi: 1.2 }).is_err());
    }

    #[test]
    fn social_optimum_matches_stationarity() {
        // (1 - phi) / (1 - t)^2 = 1 at the interior optimum
        for phi in [0.1, 0.5, 0.9] {
            let x = social_optimum(phi, 1e-12);
            assert_abs_diff_eq!(x[1], 1.0 - (1.0 - phi).sqrt(), epsilon = 1e-8);
            assert_abs_diff_eq!(x[0] + x[1], phi, epsilon = 1e-15);
        }
    }

    #[test]
    fn scale_scales_the_optimum() {
        let inst = RoutingInstance::new(0.3, 0.6).unwrap();
        let x = scale_strategy(&inst, 1e-10);
        assert_abs_diff_eq!(x[0] + x[1], 0.3 * 0.6, epsilon = 1e-12);
        let full = social_optimum(0.6, 1e-10);
        assert_abs_diff_eq!(x[1] / full[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn nash_response_matches_grid() {
        let inst = RoutingInstance::new(0.5, 0.5).unwrap();
        let p = build_stackelberg_blp(&inst).unwrap();
        let b = inst.follower_flow();
        for x in [[0.25, 0.0], [0.0, 0.25], [0.1, 0.15]] {
            let s = solve_lower(&p, &x, &InnerOptions::default()).unwrap();
            assert_eq!(s.status, InnerStatus::Converged, "kkt {}", s.kkt_residual);
            let grid = GridSpec::line(0.0, b, 1e-5).unwrap();
            let (g, _) = grid_minimize(
                |t| p.lower_objective(&x, &[b - t[0], t[0]]),
                &grid,
            );
            assert!((s.y_star[1] - g[0]).abs() <= 1e-5, "{:?} vs {g:?}", s.y_star);
            assert!((s.y_star[0] + s.y_star[1] - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn poa_is_one_at_the_optimum() {
        let inst = RoutingInstance::new(1.0, 0.7).unwrap();
        let x = social_optimum(0.7, 1e-12);
        let r = price_of_anarchy(&inst, &x, 1e-10).unwrap();
        assert_abs_diff_eq!(r.poa, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn nash_flow_poa_matches_grid() {
        let inst = RoutingInstance::new(0.0, 0.9).unwrap();
        let r = price_of_anarchy(&inst, &[0.0, 0.0], 1e-10).unwrap();
        // followers' potential and the system delay, both over the bottom flow
        let grid = GridSpec::line(0.0, 0.9, 1e-6).unwrap();
        let (nash, _) = grid_minimize(|t| (0.9 - t[0]) - 0.1 * (1.0 - t[0]).ln(), &grid);
        let (_, opt) = grid_minimize(|t| total_delay(0.9, 0.9 - t[0], t[0]), &grid);
        let grid_poa = total_delay(0.9, 0.9 - nash[0], nash[0]) / opt;
        assert!((r.poa - grid_poa).abs() <= 1e-6, "{} vs {grid_poa}", r.poa);
    }
}
