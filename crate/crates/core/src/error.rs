use std::fmt;
use std::path::PathBuf;

use crate::chunk::ChunkError;
use crate::embed::EmbedError;
use crate::extract::ExtractError;
use crate::gateway::GatewayError;
use crate::store::StoreError;
use crate::vindex::IndexError;

/// One violated configuration bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid configuration:\n  {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Violation>),
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Transport,
}

/// Umbrella error for the end-to-end pipelines (ingest, answer, calibrate).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("{0}")]
    Input(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Input(_) => ErrorClass::Usage,
            Error::Embed(e) if e.is_transport() => ErrorClass::Transport,
            Error::Gateway(e) if e.is_transport() => ErrorClass::Transport,
            Error::Extract(ExtractError::Gateway(e)) if e.is_transport() => ErrorClass::Transport,
            Error::Chunk(ChunkError::Embed(e)) if e.is_transport() => ErrorClass::Transport,
            Error::Embed(_) | Error::Gateway(_) => ErrorClass::Data,
            Error::Index(_) | Error::Extract(_) | Error::Store(_) => ErrorClass::Data,
            Error::Chunk(_) | Error::Calibration(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
