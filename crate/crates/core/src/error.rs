use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty chain")]
    EmptyChain,

    #[error("illegal residue {ch:?} at index {index}")]
    IllegalResidue { ch: char, index: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown identifier: {0}")]
    UnknownId(String),

    #[error("duplicate identifier {0}")]
    DuplicateId(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{name}: no normal form ({reason})")]
    NormalForm { name: String, reason: String },

    #[error("gram cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_) => ErrorClass::Usage,
            Error::Singular(_) | Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
