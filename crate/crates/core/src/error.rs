use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("all pixels carry the ignore label; loss is undefined")]
    AllPixelsIgnored,

    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: u8, classes: usize },

    #[error("confusion matrix has no counted pixels")]
    EmptyConfusionMatrix,

    #[error("malformed {format} header: {reason}")]
    MalformedHeader { format: &'static str, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite loss at iteration {iter} (gen={gen}, disc={disc})")]
    NonFiniteLoss { iter: usize, gen: f64, disc: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
