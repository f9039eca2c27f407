use std::path::PathBuf;

/// Error type shared by every pipeline stage.
///
/// Variants map onto the CLI exit codes: configuration problems exit 2,
/// data/format/state problems exit 3, divergence and solver failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Tensor/layer shape mismatch; message names the offending node.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Operation called out of order (backward without forward, decoder discarded, ...).
    #[error("state error: {0}")]
    State(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// Magic/version mismatch or truncated container file.
    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    #[error("convergence failure: {0}")]
    Convergence(String),

    /// Metric has no defined value for the given inputs (e.g. MAD on an empty mask).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } | Error::Convergence(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
