use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("constraints are infeasible (violation {violation:.3e})")]
    Infeasible { violation: f64 },

    #[error("solver hit the iteration limit ({iterations}) with residual {residual:.3e}")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("matrix is singular (pivot {pivot:.3e})")]
    Singular { pivot: f64 },

    #[error("active constraint Jacobian is rank deficient (rank {rank} < {rows})")]
    RankDeficient { rank: usize, rows: usize },

    #[error("Riccati iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("safe set is empty for the given state")]
    InfeasibleSafeSet,

    #[error("LICQ fails at the projected input; sensitivity undefined")]
    LicqViolation,

    #[error("a constraint is weakly active; projection is not differentiable here")]
    WeakActivity,

    #[error("no strictly feasible point found for the barrier problem")]
    NoInteriorPoint,

    #[error("quadratic model is not strictly convex in the input (min eigenvalue {min_eigenvalue:.3e})")]
    NotConvex { min_eigenvalue: f64 },

    #[error("Gram matrix is singular: {0}")]
    SingularGram(String),

    #[error("gradient estimator received an empty batch")]
    EmptyBatch,

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("tube radius r_{step} = {radius:.4} leaves no room inside the state constraint")]
    TubeInfeasible { step: usize, radius: f64 },

    #[error("unknown demo `{0}`")]
    UnknownDemo(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch {batch}: {source}")]
    Batch { batch: usize, source: Box<Error> },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
