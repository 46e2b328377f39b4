use std::path::Path;

use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {}", path.display(), e))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Run(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Io(m) | CliError::Run(m) => m,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.message() } }).to_string()
    }
}

macro_rules! run_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(e.to_string())
            }
        })*
    };
}

run_error!(
    marginmt::analysis::AnalysisError,
    marginmt::trainer::TrainError,
    marginmt::model::ModelError,
    marginmt::model::CheckpointError,
    marginmt::margin::MarginError
);

impl From<marginmt::corpus::CorpusError> for CliError {
    fn from(e: marginmt::corpus::CorpusError) -> Self {
        match e {
            marginmt::corpus::CorpusError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
