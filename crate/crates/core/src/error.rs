use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({row}, {col}) is outside a {rows}x{cols} raster")]
    OutOfBounds {
        row: isize,
        col: isize,
        rows: usize,
        cols: usize,
    },

    #[error("absolute index {index} is outside a raster of {len} pixels")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("branch width could not be determined (no valid cross-section)")]
    WidthUndetermined,

    #[error("no features available for matching")]
    NoFeatures,

    #[error("insufficient matches: {found} pairs, at least {required} required")]
    InsufficientMatches { found: usize, required: usize },

    #[error("degenerate matches: no homography gathered at least {required} inliers")]
    DegenerateMatches { required: usize },

    #[error("registration not possible: {found} inliers, at least 3 required")]
    RegistrationNotPossible { found: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("resampling failed: {0}")]
    ResampleFailure(String),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(a: (usize, usize), b: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            left_rows: a.0,
            left_cols: a.1,
            right_rows: b.0,
            right_cols: b.1,
        }
    }
}
