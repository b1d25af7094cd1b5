use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "infeasible geometry in {layer}: input length {input_len} with filter {filter}, \
         stride {stride}, padding {padding} gives no output samples"
    )]
    InfeasibleGeometry {
        layer: String,
        input_len: usize,
        filter: usize,
        stride: usize,
        padding: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("materializing {entries} weight entries exceeds the limit of {limit}")]
    MaterializationGuard { entries: u128, limit: u128 },

    #[error("{} validation error(s):\n  {}", .0.len(), .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("recording {trial} is too short: {missing}")]
    ShortRecording { trial: String, missing: String },

    #[error("too few trials: {0}")]
    TooFewTrials(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
