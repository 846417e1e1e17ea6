use capa_core::CapaError;

/// Exit code for bad flags, manifests, configs or missing inputs.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code when a stage fails while running.
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage { .. } => EXIT_STAGE,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags core errors with the stage that raised them.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for capa_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| match e {
            CapaError::Config(m) => CliError::Config(m),
            e => CliError::Stage {
                stage,
                message: e.to_string(),
            },
        })
    }
}

impl<T> StageExt<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}
