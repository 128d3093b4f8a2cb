use std::fmt;

/// Pipeline failure with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad or incomplete configuration (exit code 2).
    Config(String),
    /// A stage could not process its input (exit code 1).
    Stage { stage: &'static str, cause: String },
}

impl CliError {
    pub fn stage(stage: &'static str, cause: impl fmt::Display) -> Self {
        CliError::Stage {
            stage,
            cause: cause.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Stage { stage, cause } => write!(f, "stage {stage} failed: {cause}"),
        }
    }
}

impl std::error::Error for CliError {}
