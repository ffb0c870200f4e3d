use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no grid cell lies in the requested interior region (d > {margin})")]
    EmptyDomain { margin: f64 },

    #[error("barrier blend infeasible for width {width}: {reason}")]
    BlendInfeasible { width: f64, reason: String },

    #[error("running cost is not convex in the control: Hessian eigenvalue {eigenvalue:.3e} at sample {sample}")]
    NonConvexCost { eigenvalue: f64, sample: usize },

    #[error("growth exponent q = {q} violates the quadratic-growth guard (requires q >= 2)")]
    GrowthViolation { q: f64 },

    #[error("CFL condition violated: dt * max|H_p| / h = {ratio:.4} > 1")]
    CflViolation { ratio: f64 },

    #[error("linear solver failed: {0}")]
    SolverDiverged(String),

    #[error("negative density {value:.3e} at slice {slice}, cell {cell}")]
    NegativeDensity { value: f64, slice: usize, cell: usize },

    #[error("drift is unbounded on the mask ({value:e} at x = {x:?})")]
    DriftUnboundedOnMask { value: f64, x: Vec<f64> },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("densities were produced by different drift fields")]
    DriftMismatch,

    #[error("no stored paths available; rerun with path storage enabled")]
    NoStoredPaths,

    #[error("invariance condition fails (min margin {min_margin:.3e}); set the override flag to proceed")]
    InvarianceNotSatisfied { min_margin: f64 },

    #[error("Hamiltonian structure check failed: {0}")]
    StructureCheckFailed(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("field file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
