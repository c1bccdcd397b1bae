//! Everything around the detector: configuration, scene files, synthetic
//! scenes, training, evaluation and the command-line front end.

pub mod checks;
pub mod config;
pub mod evaluate;
pub mod io;
pub mod scene;
pub mod synth;
pub mod train;

use std::path::Path;

use m3fuse_core::model::ModelError;
use m3fuse_core::numerics::{CheckpointError, NumericsError};
use thiserror::Error;

pub use config::PipelineConfig;
pub use scene::{Label, Scene};

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad input: configuration, files, or a checkpoint that does not fit.
    #[error("{0}")]
    Validation(String),
    /// A loss or gradient stopped being finite.
    #[error("numeric abort at step {step}: {detail}")]
    Numeric { step: usize, detail: String },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for numeric aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numeric { .. } => 2,
            Self::Model(ModelError::Numerics(NumericsError::NonFiniteGradient { .. })) => 2,
            Self::Numerics(NumericsError::NonFiniteGradient { .. }) => 2,
            Self::Model(ModelError::Loss(m3fuse_core::losses::LossError::NonFinite(_))) => 2,
            _ => 1,
        }
    }
}
