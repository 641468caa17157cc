use psce_core::PsceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(PsceError),
    #[error("{0}")]
    Numeric(PsceError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Output { .. } => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }
}

impl From<PsceError> for CliError {
    fn from(e: PsceError) -> Self {
        match e {
            // a column named in the configuration that the file lacks
            PsceError::MissingColumn(c) => CliError::Config(format!("unknown column `{c}`")),
            PsceError::InvalidArgument(m) => CliError::Config(m),
            e if e.is_data_error() => CliError::Data(e),
            e => CliError::Numeric(e),
        }
    }
}
