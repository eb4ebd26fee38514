use std::path::PathBuf;

use thiserror::Error;

use cogchain_core::extraction::{ExtractionError, ProviderError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("missing {path}; {hint}")]
    Prerequisite { path: PathBuf, hint: String },
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

impl CliError {
    /// 0 success, 1 validation failure, 2 missing prerequisite, 3 provider
    /// failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Prerequisite { .. } => 2,
            CliError::Provider(_) => 3,
            CliError::Validation(_) | CliError::Io { .. } | CliError::Config(_) => 1,
        }
    }

    /// A missing artifact produced by `stage`.
    pub fn needs_stage(stage: &str, path: impl Into<PathBuf>) -> Self {
        CliError::Prerequisite {
            path: path.into(),
            hint: format!("run `cogchain run {stage}` first"),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        CliError::Provider(e.to_string())
    }
}

impl From<ExtractionError> for CliError {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Provider(p) => p.into(),
            ExtractionError::Chains { ref violations, .. } if !violations.is_empty() => {
                let list: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
                CliError::Validation(format!("{e}\n{}", list.join("\n")))
            }
            ExtractionError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
