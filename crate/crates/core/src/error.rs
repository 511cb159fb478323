use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown word {0:?} (not in vocabulary)")]
    UnknownWord(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("{side} text has {len} words but the per-side budget is {budget}")]
    Budget {
        side: &'static str,
        len: usize,
        budget: usize,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors that indicate a broken invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::Consistency(_) | Error::NonFinite(_) | Error::Numeric(_) | Error::Contract(_)
        )
    }
}
