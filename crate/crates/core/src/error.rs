use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not match {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("CTC target needs at least {required} frames but the lattice has {frames}")]
    InfeasibleTarget { frames: usize, required: usize },

    #[error("brute-force CTC would enumerate {paths} paths (limit {limit})")]
    EnumerationGuard { paths: f64, limit: f64 },

    #[error("attention pooling needs at least one active frame")]
    EmptyMask,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token {0} is not in the vocabulary")]
    UnknownToken(usize),

    #[error("placement of {len} frames at onset {onset} overflows a {frames}-frame mixture")]
    PlacementOverflow { onset: usize, len: usize, frames: usize },

    #[error("unsupported talker count {0} (expected 2 or 3)")]
    TalkerCount(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
