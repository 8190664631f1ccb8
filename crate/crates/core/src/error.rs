use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box on axis {axis}: lo={lo} must be < hi={hi}")]
    DegenerateBox { axis: usize, lo: f64, hi: f64 },

    #[error("axis {axis} needs at least 2 nodes, got {nodes}")]
    TooFewNodes { axis: usize, nodes: usize },

    #[error("grid node count overflows the addressable index space")]
    NodeCountOverflow,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid dimension {0} exceeds the supported maximum of {max}", max = crate::grid::MAX_DIM)]
    TooManyDimensions(usize),

    #[error("fields are defined on different grids")]
    GridMismatch,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },

    #[error("unknown problem `{0}` (expected one of: constant, linear1d, impulse1d, portfolio)")]
    UnknownProblem(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("problem failed validation: {0}")]
    Validation(String),

    #[error("step size invalid: lambda*h = {0} must lie in (0, 1)")]
    InvalidStep(f64),

    #[error("divergence guard triggered at sweep {iteration}: |v|_inf = {norm} exceeds {threshold}")]
    Divergence { iteration: usize, norm: f64, threshold: f64 },

    #[error("refusing to use a non-converged solve ({iterations} sweeps, last delta {last_delta})")]
    NotConverged { iterations: usize, last_delta: f64 },

    #[error("forms do not match: {0}")]
    FormMismatch(String),

    #[error("more than {limit} consecutive impulses at t = {t}")]
    ImpulseLoop { t: f64, limit: usize },

    #[error("horizon {horizon} is not a multiple of the step {h}")]
    HorizonNotMultiple { horizon: f64, h: f64 },

    #[error("oracle work budget of {budget} tree nodes exceeded")]
    BudgetExceeded { budget: usize },

    #[error("field csv: {0}")]
    FieldCsv(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
