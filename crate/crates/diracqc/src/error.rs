//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension for {what}: {value}")]
    InvalidDimension { what: &'static str, value: usize },

    #[error("dimension mismatch: {what} has {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("non-finite value in {what} at component {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("degenerate constraint set: {detail} (rcond {rcond:.3e})")]
    DegenerateConstraints { detail: String, rcond: f64 },

    #[error("adiabatic degeneracy: gap {gap:.3e} below floor {floor:.3e} between states {alpha} and {beta}")]
    Degeneracy {
        alpha: usize,
        beta: usize,
        gap: f64,
        floor: f64,
    },

    #[error("eigenvector path too coarse: overlap diagonal {overlap:.3} < 0.5")]
    PathTooCoarse { overlap: f64 },

    #[error("frustrated hop: (P.d)^2 + shift = {value:.6e} < 0")]
    FrustratedHop { value: f64 },

    #[error("step rejected: constraint drift {drift:.3e} exceeds 10 x tolerance {tol:.3e}; reduce dt")]
    StepRejected { drift: f64, tol: f64 },

    #[error("manifold projection failed after {iters} Newton iterations (|sigma| = {residual:.3e})")]
    ProjectionFailed { iters: usize, residual: f64 },

    #[error("all {count} trajectories were truncated; no statistics produced")]
    AllTrajectoriesTruncated { count: usize },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
