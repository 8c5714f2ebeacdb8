//! Duality-based solver for optimistic bilevel programs with convex lower levels.
//!
//! The lower-level optimality condition is replaced by a single smooth
//! inequality built from the regularized constrained dual function
//! `h_mu(lambda, x) = min_{y in Y} mu ||y||^2 + f(x,y) + lambda' g(x,y)`, whose
//! gradients follow from the envelope theorem. See [`dbp`] for the
//! single-level problem and [`homotopy`] for the outer loop.

pub mod checks;
pub mod dbp;
pub mod dual;
pub mod error;
pub mod experiments;
pub mod homotopy;
pub mod inner;
pub mod oracles;
pub mod pqn;
pub mod problem;
pub mod qn;
pub mod sweep;

pub use error::{ModelError, SolveError};
pub use problem::{BilevelProblem, BoxSet, LowerBlock, SmoothScalarFn, SmoothVectorFn};
