use augweight_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed:\n{0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Csv(_) => EXIT_CONFIG,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                CoreError::Invalid(_) | CoreError::Parse(_) | CoreError::Io(_) => EXIT_CONFIG,
                CoreError::Divergence { .. }
                | CoreError::Numeric(_)
                | CoreError::NonFinite { .. }
                | CoreError::NonFiniteGradient(_) => EXIT_DIVERGENCE,
                _ => EXIT_VERIFY,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
