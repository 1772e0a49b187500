use std::path::PathBuf;

/// Errors raised by the srcnet library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("architecture mismatch at parameter `{name}`: {detail}")]
    ArchitectureMismatch { name: String, detail: String },

    #[error("malformed {kind} file {}: {detail}", path.display())]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("incomplete dataset at {}: {detail}", path.display())]
    IncompleteDataset { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
