//! LPV scene-text recognizer built from scratch.
//!
//! The model reads a word image through two cooperating branches: a cascade
//! of position-attention decoders that refine per-character attention maps
//! stage by stage, and a feature branch that re-encodes the visual tokens
//! between stages with masked self-attention so each character's features
//! are reconstructed from the context of the other characters.
//!
//! Everything is CPU-only and deterministic: a seedable RNG, a reverse-mode
//! tensor library with finite-difference checks, a synthetic word-image
//! generator with a built-in bitmap font, and a training loop whose results
//! are bit-identical across runs (and across the `parallel` feature, which
//! shards per-sample work over rayon with ordered reductions).

pub mod backbone;
pub mod charset;
pub mod glrm;
pub mod model;
pub mod nn;
pub mod pam;
pub mod pgm;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
