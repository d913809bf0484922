use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must hold exactly one element, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable is not recorded on this tape")]
    ForeignVar,

    #[error("scan elements mix gate kinds or shapes")]
    ScanKindMismatch,

    #[error("scan requires at least one element")]
    EmptyScan,

    #[error("routing {routing} is only defined for seq-BIM, not {variant}")]
    RoutingNotSupported {
        variant: &'static str,
        routing: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("iteration {iter} outside schedule of {iterations} iterations")]
    IterationOutOfRange { iter: usize, iterations: usize },

    #[error("resample budget exhausted after {0} attempts")]
    ResampleExhausted(usize),

    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("no convergent seeds to aggregate")]
    NoConvergentSeeds,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
