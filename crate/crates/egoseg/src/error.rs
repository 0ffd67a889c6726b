//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid class value {value} (valid classes are 0..=5){}", source_file.as_ref().map(|f| format!(" in {f}")).unwrap_or_default())]
    InvalidClass {
        value: u32,
        source_file: Option<String>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {layer}")]
    NonFinite { layer: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("scene placement failed after {retries} retries (seed {seed}): {what}")]
    Placement {
        seed: u64,
        retries: usize,
        what: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iter}: {term} is non-finite")]
    Diverged { iter: u64, term: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
