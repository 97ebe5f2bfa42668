use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] qdecomp_core::Error),
}

impl RunError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for I/O and bad
    /// files, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use qdecomp_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::ConfigInvalid(_) | E::SpecInvalid(_)) => 2,
            Self::Io { .. } | Self::Checkpoint(_) => 3,
            Self::Core(_) => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format: {0}")]
    FormatVersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;
