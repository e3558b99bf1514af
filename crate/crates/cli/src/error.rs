use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] rno_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 4 for I/O and unreadable files.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &rno_core::Error) -> i32 {
    use rno_core::Error as E;
    match e {
        E::Sample { source, .. } => core_exit_code(source),
        e if e.is_numerical() => EXIT_NUMERICAL,
        E::Io(_) | E::Format(_) | E::Json(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rno_core::Error as E;

    #[test]
    fn exit_codes() {
        let io = || std::io::Error::new(std::io::ErrorKind::NotFound, "x");
        assert_eq!(CliError::config("x").exit_code(), 2);
        assert_eq!(CliError::io("p", io()).exit_code(), 4);
        assert_eq!(CliError::Core(E::TrainingDiverged { epoch: 1 }).exit_code(), 3);
        assert_eq!(CliError::Core(E::Io(io())).exit_code(), 4);
        let blow = E::Sample { sample: 3, source: Box::new(E::BlowUp { step: 2, magnitude: 11.0 }) };
        assert_eq!(CliError::Core(blow).exit_code(), 3);
        let cfg = E::Config { field: "alpha".into(), reason: "bad".into() };
        assert_eq!(CliError::Core(cfg).exit_code(), 2);
    }
}
