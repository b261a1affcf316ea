use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// A file exists but does not parse as the expected format.
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("dimension mismatch: expected {expected_width}x{expected_height}, got {actual_width}x{actual_height}")]
    DimensionMismatch {
        expected_width: usize,
        expected_height: usize,
        actual_width: usize,
        actual_height: usize,
    },

    #[error("invalid parameter {name}: {msg}")]
    InvalidParameter { name: String, msg: String },

    /// A map that must be binary holds some other value.
    #[error("label map is not binary: value {value} at row {row}, col {col}")]
    NonBinaryLabel { row: usize, col: usize, value: u32 },

    /// Clustering produced no usable class structure and the pipeline
    /// cannot continue.
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),
}

impl Error {
    pub fn invalid(name: &str, msg: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            msg: msg.into(),
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
