use thiserror::Error;

/// Errors produced across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: String, got: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("detector state error: {0}")]
    State(String),

    #[error("missing upstream artifact: {0}")]
    Dependency(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 dependency, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Dependency(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_cli_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Dependency("x".into()).exit_code(), 3);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
        assert_eq!(
            Error::Evaluation("x".into()).exit_code(),
            1,
            "non-special errors exit 1"
        );
    }
}
