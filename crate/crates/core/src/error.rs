use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed validation (NaN/Inf, bad value range).
    #[error("data validation: {0}")]
    DataValidation(String),

    /// A structural invariant of a value was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Ground truth has no valid pixel; the sample must be skipped upstream.
    #[error("ground truth has no valid pixels")]
    EmptyGroundTruth,

    #[error("config: {0}")]
    Config(String),

    #[error("dmap: {0}")]
    Dmap(#[from] crate::data::dmap::DmapError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, sample {sample}: loss = {loss}")]
    Divergence { epoch: usize, sample: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
