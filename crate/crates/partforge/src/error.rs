use std::path::Path;

use crate::checkpoint::CheckpointError;
use crate::gltf::GltfError;
use crate::mesh_io::MeshIoError;

/// Failure of a command, classified by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    /// Data error naming the file involved.
    pub fn at(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Data(format!("{}: {err}", path.display()))
    }
}

impl From<partforge_core::Error> for CliError {
    fn from(e: partforge_core::Error) -> Self {
        match e {
            partforge_core::Error::NonFiniteLoss { .. } => Self::Numeric(e.to_string()),
            partforge_core::Error::Config(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MeshIoError> for CliError {
    fn from(e: MeshIoError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<GltfError> for CliError {
    fn from(e: GltfError) -> Self {
        Self::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
