use thiserror::Error;

/// Errors raised by the estimation, simulation and diagnostic routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("derivative order {order} exceeds polynomial order {max}")]
    OrderExceeded { order: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid design grid: {0}")]
    InvalidGrid(String),

    #[error("invalid design density: {0}")]
    InvalidDensity(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "singular design at x = {x:?}, h = {h}: smallest eigenvalue {eigenvalue:.3e} below floor {floor:.3e}"
    )]
    SingularDesign {
        x: Vec<f64>,
        h: f64,
        eigenvalue: f64,
        floor: f64,
    },

    #[error("no valid bandwidth: every candidate produced a degenerate fit")]
    NoValidBandwidth,

    #[error(
        "covariance factorization failed after jitter {jitter:.1e}; try a coarser grid or remove duplicate points"
    )]
    Factorization { jitter: f64 },

    #[error("holder exponent undefined: {0}")]
    UndefinedExponent(String),

    #[error("csv error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
