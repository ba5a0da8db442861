//! Crate-wide error type and the exit-code classes the CLI maps it to.

use std::path::PathBuf;

/// Coarse failure class, used by the CLI to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration: label spaces, plans, strategy specs, CLI arguments.
    Config,
    /// Bad or missing data: volume files, manifests, checkpoints.
    Data,
    /// Numerical failure during computation (non-finite values, divergence).
    Numerical,
    /// Anything else (I/O, serialization).
    Other,
}

impl ErrorClass {
    /// Process exit code for this class. 0 is reserved for success.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
            ErrorClass::Other => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no previous stage: {0} requires a stage index >= 1")]
    NoPreviousStage(&'static str),

    #[error("channel mismatch: expected channels {expected:?}, got {got:?}")]
    ChannelMismatch { expected: Vec<u16>, got: Vec<u16> },

    #[error("invalid label {label} at voxel {voxel}: stage {stage} allows only background and {allowed:?}")]
    InvalidLabel {
        label: u16,
        voxel: usize,
        stage: usize,
        allowed: Vec<u16>,
    },

    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("spatial shape {got:?} not divisible by {required} (network with {levels} resolution levels)")]
    IncompatibleShape {
        got: Vec<usize>,
        required: usize,
        levels: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad volume file {path}: {reason}")]
    VolumeFormat { path: PathBuf, reason: String },

    #[error("volume file {path}: version {found} unsupported (expected {expected})")]
    VolumeVersion {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("volume file {path}: truncated payload, expected {expected} bytes, got {actual}")]
    VolumeTruncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("bad checkpoint {path}: {reason}")]
    CheckpointFormat { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no results found under {0}")]
    NoResults(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The exit-code class this error belongs to.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_)
            | Error::NoPreviousStage(_)
            | Error::ChannelMismatch { .. }
            | Error::InvalidLabel { .. }
            | Error::ShapeMismatch { .. }
            | Error::IncompatibleShape { .. }
            | Error::Config(_) => ErrorClass::Config,
            Error::VolumeFormat { .. }
            | Error::VolumeVersion { .. }
            | Error::VolumeTruncated { .. }
            | Error::CheckpointFormat { .. }
            | Error::Data(_)
            | Error::NoResults(_) => ErrorClass::Data,
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Io { .. } | Error::Serde(_) => ErrorClass::Other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
