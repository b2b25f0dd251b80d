use thiserror::Error;

/// Errors raised by model construction, fitting and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),

    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("component {0} is a singleton: degenerate Laplacian block")]
    DegenerateBlock(usize),

    #[error("observation {obs} references unknown macro-area {area}")]
    UnknownArea { obs: usize, area: usize },

    #[error("macro-area {area} assigned to components {first} and {second}")]
    ConflictingComponent {
        area: usize,
        first: usize,
        second: usize,
    },

    #[error("macro-area {0} has no observations; aggregation is undefined")]
    EmptyArea(usize),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("association parameter phi = {0} outside (0, 1)")]
    PhiOutOfRange(f64),

    #[error("design matrix is rank deficient; dependent columns: {0:?}")]
    RankDeficient(Vec<usize>),

    #[error("Moran's I undefined for a constant vector")]
    ConstantVector,

    #[error("removal count {k} exceeds limit {max} for component {component}")]
    PatternOutOfRange {
        component: usize,
        k: usize,
        max: usize,
    },

    #[error("deconfounded column {0} has zero variance; cannot rescale")]
    ZeroVarianceColumn(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fewer than {needed} draws supplied ({got})")]
    TooFewDraws { needed: usize, got: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
