use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("training diverged: {0}")]
    Train(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
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
}

pub type Result<T> = std::result::Result<T, Error>;
