use thiserror::Error;

/// Errors raised by the library.
///
/// Variants are grouped so that callers (the CLI in particular) can map
/// them onto distinct exit codes: configuration, data and numerical faults.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("malformed image {path}: {reason}")]
    MalformedImage { path: String, reason: String },

    #[error("dimension mismatch between image ({image_h}x{image_w}) and depth ({depth_h}x{depth_w})")]
    DimensionMismatch {
        image_h: usize,
        image_w: usize,
        depth_h: usize,
        depth_w: usize,
    },

    #[error("manifest parse error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("depth {value} m exceeds range [{d_min}, {d_max}] beyond quantization")]
    DepthOutOfRange { value: f64, d_min: f64, d_max: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by inputs on disk rather than by configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::MalformedImage { .. }
                | Error::DimensionMismatch { .. }
                | Error::Manifest { .. }
                | Error::DepthOutOfRange { .. }
                | Error::Dataset(_)
                | Error::EmptyDataset
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
