use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the magnitude library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The similarity matrix is singular or too ill-conditioned to solve.
    #[error("{}", not_invertible_message(*.rcond, *.duplicate, *.patch))]
    NotInvertible {
        rcond: f64,
        /// First pair of points with identical feature vectors, if any.
        duplicate: Option<(usize, usize)>,
        /// Index of the patch that failed when solving a tiled image.
        patch: Option<usize>,
    },

    #[error("insufficient memory: dense solve of {points} points needs {required} bytes, {available} available")]
    InsufficientMemory {
        points: usize,
        required: u64,
        available: u64,
    },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read or write image {path}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn not_invertible_message(rcond: f64, duplicate: Option<(usize, usize)>, patch: Option<usize>) -> String {
    let mut msg = format!("similarity matrix is not invertible (rcond {rcond:.3e})");
    if let Some((i, j)) = duplicate {
        msg.push_str(&format!("; points {i} and {j} coincide"));
    }
    if let Some(p) = patch {
        msg.push_str(&format!("; in patch {p}"));
    }
    msg
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// Whether this error comes from a failed numerical solve, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotInvertible { .. } | Error::InsufficientMemory { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
