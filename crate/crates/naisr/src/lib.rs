//! Additive implicit shape representation.
//!
//! A learned template signed-distance field is deformed by one displacement
//! network per covariate; displacements are zero-anchored so that a zero
//! (centered) covariate contributes no deformation, and summed so that each
//! covariate's effect stays attributable. The crate ships the full pipeline:
//!
//! - [`diffnet`]: sine-activation MLPs with forward-mode spatial Jacobians,
//!   hand-derived reverse accumulation, and Adam.
//! - [`model`]: the template/displacement composition and its evaluations.
//! - [`losses`]: the training objective (Eikonal, Dirichlet, Neumann terms
//!   plus latent regularization).
//! - [`starman`]: deterministic synthesis of the 2D Starman benchmark.
//! - [`sampling`]: exact polyline signed distances and point-batch sampling.
//! - [`trainer`]: auto-decoder training and checkpoint I/O.
//! - [`inference`]: reconstruction, disentanglement, evolution, transfer.
//! - [`geometry`]: marching squares, unit normalization, shape metrics.
//! - [`dataio`]: dataset file formats.

pub mod diffnet;
pub mod losses;
pub mod model;
pub mod rng;

use std::path::PathBuf;

/// Crate-wide error type. Variants mirror the failure classes surfaced at the
/// CLI: configuration and dimension errors are caller bugs, format/validation
/// errors come from files, numerical errors abort optimization.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
