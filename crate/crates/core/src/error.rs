use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular system (condition estimate {condition:e})")]
    Singular { condition: f64 },

    /// An operation is mathematically undefined for the given input
    /// (e.g. contrastive loss on a batch with no contrastive structure).
    #[error("{0}")]
    Undefined(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (encoder norm {encoder_norm:e}, head norm {head_norm:e})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        encoder_norm: f64,
        head_norm: f64,
    },

    #[error("degenerate: exact tie (all paired differences are zero)")]
    ExactTie,

    #[error("degenerate: constant difference {0}")]
    ConstantDifference(f64),

    #[error("{0}")]
    NotFound(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// failures while executing a well-formed request.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::InvalidArgument { .. }
                | Error::Shape(_)
                | Error::Parse(_)
                | Error::NotFound(_)
        )
    }
}
