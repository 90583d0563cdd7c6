use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] moreflow_diffcore::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{what}, line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{name} = {value} is outside {range}")]
    Range {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("unknown skeleton `{0}`")]
    UnknownSkeleton(String),
    #[error("unknown joint or limb `{0}`")]
    UnknownJoint(String),
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("the null condition has no feature extractor")]
    NullCondition,
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("empty batch")]
    EmptyBatch,
    #[error("token {index} out of range for vocabulary of {size}")]
    InvalidToken { index: usize, size: usize },
    #[error("no model for pair {0}")]
    MissingModel(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            what,
            line,
            msg: msg.into(),
        }
    }
}
