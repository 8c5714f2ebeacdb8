use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("box bounds must be finite and ordered (component {index}: [{lower}, {upper}])")]
    InvalidBox { index: usize, lower: f64, upper: f64 },
    #[error("box dimension mismatch: lower has {lower} entries, upper has {upper}")]
    BoxLength { lower: usize, upper: usize },
    #[error("oracle `{oracle}` has dimension {found} but {expected} was expected for {what}")]
    DimensionMismatch {
        oracle: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("bilevel problem needs at least one lower-level block")]
    NoBlocks,
    #[error("invalid equality pair ({0}, {1})")]
    BadEqualityPair(usize, usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("lower level has no strictly feasible point at this x (max constraint {max_violation:.3e})")]
    Infeasible { max_violation: f64 },
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no feasible point found (max residual {max_residual:.3e})")]
    NoFeasiblePoint { max_residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}
