use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MladError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MladError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("factorization failed for mixture component {component}")]
    Factorization { component: usize },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("template keys missing from embedding table: {0:?}")]
    MissingKeys(Vec<u32>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("split error: {normal} normal windows cannot balance {anomalous} anomalous windows")]
    Split { normal: usize, anomalous: usize },

    #[error("version mismatch: file has {found}, this build reads {expected}")]
    Version { found: String, expected: String },

    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: &'static str },
}

impl MladError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MladError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        MladError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            MladError::NumericDomain { .. }
                | MladError::NonFinite(_)
                | MladError::Factorization { .. }
                | MladError::Estimation(_)
                | MladError::Diverged { .. }
        )
    }
}
