use std::path::PathBuf;

use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] rdt_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        use rdt_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Core(e) => match e {
                E::Shape(_) => "shape",
                E::Parse { .. } => "parse",
                E::EmptyManifest => "empty-manifest",
                E::Io { .. } => "io",
                E::Format(_) => "format",
                E::Invalid(_) => "invalid",
                E::Domain(_) => "domain",
                E::Numeric(_) => "numeric",
                E::Contract(_) => "contract",
            },
        }
    }

    /// 2 usage or configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use rdt_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Core(E::Domain(_) | E::Numeric(_) | E::Contract(_)) => 4,
            CliError::Core(_) => 3,
        }
    }

    /// `error: kind=<kind> msg=<message>` on a single line.
    pub fn line(&self) -> String {
        format_error(self.kind(), &self.to_string())
    }
}

pub fn format_error(kind: &str, msg: &str) -> String {
    let flat: Vec<&str> = msg.split_whitespace().collect();
    format!("error: kind={kind} msg={}", flat.join(" "))
}

pub type CliResult<T> = Result<T, CliError>;
