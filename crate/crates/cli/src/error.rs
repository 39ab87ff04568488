//! Failure classes and their exit codes.

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<gpct::Error> for CliError {
    fn from(e: gpct::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(gpct::Error::Numerical("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(gpct::Error::Invalid("x".into())).exit_code(), 2);
        assert_eq!(CliError::Io("x".into()).exit_code(), 3);
    }
}
