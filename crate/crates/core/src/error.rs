use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("no gradient for parameter #{index}")]
    MissingGradient { index: usize },

    #[error("time {t} is within 1e-9 of the horizon {horizon}")]
    HorizonBoundary { t: f64, horizon: f64 },

    #[error("time {t} outside the open interval (0, {horizon})")]
    TimeDomain { t: f64, horizon: f64 },

    #[error("invalid bridge: {0}")]
    InvalidBridge(String),

    #[error("spline needs at least two knots, got {0}")]
    TooFewKnots(usize),

    #[error("spline knot positions must be strictly increasing (position {position} repeats or decreases)")]
    DuplicateKnot { position: f64 },

    #[error("token id {id} out of vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("mask position {position} outside sequence of length {len}")]
    InvalidMaskPosition { position: usize, len: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("covariance rank {achieved} is below the requested latent dimension {requested}")]
    DegenerateCovariance { achieved: usize, requested: usize },

    #[error("label word {label} has {have} examples, need {need}")]
    InsufficientClass { label: usize, have: usize, need: usize },

    #[error("metric {metric} needs binary labels, found {classes} classes")]
    MetricLabels { metric: &'static str, classes: usize },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("all observations tied in {0}")]
    AllTied(&'static str),

    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },

    #[error("centroid distance needs at least two labels")]
    SingleLabel,

    #[error("running cost method {0} requires a fitted mapping and endpoints")]
    MissingMap(&'static str),

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
