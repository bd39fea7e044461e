use std::path::PathBuf;

use thiserror::Error;

/// Knot whose texture bin holds too few calibration samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StarvedKnot {
    pub knot: f64,
    pub count: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),

    #[error("calibration starved: {}", fmt_starved(.0))]
    Calibration(Vec<StarvedKnot>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn fmt_starved(knots: &[StarvedKnot]) -> String {
    knots
        .iter()
        .map(|k| format!("knot {:.4e} has {} samples", k.knot, k.count))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
