use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read config {path}: {source}")]
    ConfigIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("stage {stage:?} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: vem_core::Error,
    },
    #[error(transparent)]
    Core(#[from] vem_core::Error),
    #[error("cannot open log {path}: {source}")]
    Log {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code: 2 config, 3 data/integrity, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use vem_core::Error as E;
        let core = match self {
            CliError::Config(_) | CliError::ConfigIo { .. } | CliError::Log { .. } => return 2,
            CliError::Stage { source, .. } => source,
            CliError::Core(e) => e,
        };
        match core {
            E::Numerical(_) => 4,
            E::Usage(_) => 2,
            _ => 3,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            CliError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Tags a core error with the pipeline stage it came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for vem_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
