//! Training loops, evaluation sweeps, reporting and the command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod plot;
pub mod pointflow;
pub mod train;

use std::path::Path;

use thiserror::Error;

use crate::cfm::CfmError;
use crate::checkpoint::CheckpointError;
use crate::flowode::FlowError;
use crate::numerics::TensorError;
use crate::synthtask::SynthError;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("{0}")]
    Contract(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for contract violations, 2 for IO, parse and usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Io { .. } | Self::Usage(_) => 2,
            Self::Checkpoint(e) => match e {
                CheckpointError::Io(_) | CheckpointError::BadMagic | CheckpointError::Truncated(_) | CheckpointError::Header(_) => 2,
                CheckpointError::VersionMismatch { .. } | CheckpointError::DescriptorMismatch(_) => 1,
            },
            Self::Synth(SynthError::Io(_) | SynthError::Format(_)) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}
