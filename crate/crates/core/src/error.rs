use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An operator received operands whose shapes it cannot combine.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// An operator produced NaN or an infinity.
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requested before forward: {0}")]
    BackwardBeforeForward(String),

    /// A gradient handed to the optimizer contained NaN or an infinity.
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    /// A loss evaluated at a perturbed point was not finite.
    #[error("non-finite loss at coordinate {index} (perturbation {sign})")]
    NonFiniteLoss { index: usize, sign: char },

    /// Training stopped because a step produced a non-finite loss or gradient.
    #[error("training step {step}: {detail}")]
    TrainingStep { step: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown condition id `{0}`")]
    UnknownCondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("Sinkhorn did not converge in {iters} iterations (marginal violation {violation:e})")]
    SinkhornNotConverged { iters: usize, violation: f64 },

    #[error("rank condition unsatisfied after {0} resamples")]
    RankCondition(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by malformed user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::UnknownCondition(_)
                | Error::InvalidArgument(_)
                | Error::EmptyBatch
                | Error::Format { .. }
                | Error::Json(_)
        )
    }
}
