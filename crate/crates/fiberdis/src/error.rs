use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("boundary point: x = {x} is within {margin} of a partition endpoint")]
    BoundaryPoint { x: f64, margin: f64 },

    #[error("orbit hits discontinuity at step {step} (x = {x})")]
    OrbitDiscontinuity { x: f64, step: usize },

    #[error("enumeration budget exceeded: depth {depth} needs {needed} words, cap is {cap}")]
    EnumerationBudget { depth: usize, needed: u128, cap: u128 },

    #[error("insufficient smoothness: {0}")]
    InsufficientSmoothness(String),

    #[error("density not converged: residual {residual} after {iterations} iterations")]
    DensityNotConverged { residual: f64, iterations: usize },

    #[error("sandwich not converged: bracket {bracket} above tol {tol} at depth cap {n_cap}")]
    SandwichNotConverged { bracket: f64, tol: f64, n_cap: usize },

    #[error("cauchy stopping rule not satisfied: bound {bound} above tol {tol} at depth cap {n_cap}")]
    CauchyNotConverged { bound: f64, tol: f64, n_cap: usize },

    #[error("observable not Hölder-admissible: {0}")]
    NotHolderAdmissible(String),

    #[error("outside suspension domain: u = {u} above roof {roof} at x = {x}")]
    OutsideSuspensionDomain { x: f64, u: f64, roof: f64 },

    #[error("syntax error at position {position}: expected {expected}")]
    Parse { position: usize, expected: String },

    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { name: String, position: usize },

    #[error("arity mismatch for `{name}` at position {position}: expected {expected}, got {got}")]
    ArityMismatch { name: String, position: usize, expected: usize, got: usize },

    #[error("unbound variable `{0}`")]
    UnboundVariable(String),

    #[error("domain error in `{subexpr}`: {reason}")]
    Domain { subexpr: String, reason: String },

    #[error("non-differentiable at the evaluation point in `{0}`")]
    NonDifferentiable(String),

    #[error("non-smooth expression rejected: `{0}` contains abs/min/max/sqrt")]
    NonSmoothExpression(String),

    #[error("non-finite value in report (field `{0}`)")]
    NonFiniteReport(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("observable gradient inconsistent with finite differences: {0}")]
    GradientMismatch(String),

    #[error("io error on `{path}`: {message}")]
    Io { path: String, message: String },

    #[error("too many quadrature nodes excluded: {excluded} of {total}")]
    TooManyExcludedNodes { excluded: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
