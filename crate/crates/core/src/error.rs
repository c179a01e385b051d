use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("variable belongs to a different tape")]
    ForeignTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("effective sample size {ess:.1} is below {min}; increase the pool size")]
    LowEffectiveSampleSize { ess: f64, min: f64 },

    #[error("all {0} chains produced non-finite states")]
    AllChainsDead(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
