use mistlab::MistError;
use thiserror::Error;

/// Driver errors, grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<MistError> for CliError {
    fn from(e: MistError) -> Self {
        let msg = e.to_string();
        match e {
            MistError::InvalidConfig(_)
            | MistError::TooManySubsets { .. }
            | MistError::InsufficientCoverage { .. }
            | MistError::InvalidLayerDims(_)
            | MistError::TopKTooLarge { .. } => CliError::Config(msg),
            MistError::NonFiniteGradient { .. }
            | MistError::NonFiniteParameter { .. }
            | MistError::TooFewScores { .. }
            | MistError::EmptySide
            | MistError::NoModels => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
