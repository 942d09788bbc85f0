use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector: norm below 1e-12")]
    ZeroVector,

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("tape is empty; run a forward pass before backward")]
    TapeEmpty,

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("omega {0} outside [0, 1]")]
    OmegaOutOfRange(f64),

    #[error("decoupling is undefined at omega = 0")]
    OmegaZero,

    #[error("need at least 4 classes, got {0}")]
    TooFewClasses(usize),

    #[error(
        "batch {batch} x top-k {k} must stay below {n_base} base classes; largest admissible k is {suggested_k}"
    )]
    BatchExceedsBaseClasses {
        n_base: usize,
        batch: usize,
        k: usize,
        suggested_k: usize,
    },

    #[error("label {label} out of range for {n} candidates")]
    LabelOutOfRange { label: usize, n: usize },

    #[error("loss diverged in {stage} at step {step}: {loss}")]
    DivergedLoss {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),

    #[error("split has no classes or no images")]
    EmptySplit,

    #[error("harmonic mean undefined when both accuracies are zero")]
    BothZero,

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
