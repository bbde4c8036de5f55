use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,
    #[error("zero vector")]
    ZeroVector,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric at ({0},{1})")]
    NotSymmetric(usize, usize),
    #[error("invalid cluster count: k={k} for {n} points")]
    ClusterCount { k: usize, n: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("box {0} does not fit inside {1}x{2} image")]
    BoxOutsideImage(String, usize, usize),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no patches")]
    NoPatches,
    #[error("invalid group {0}")]
    InvalidGroup(usize),
    #[error("cannot designate noise with one group")]
    SingleGroupNoise,
    #[error("need at least two classes")]
    SingleClass,
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("report line {line}: {msg}")]
    Report { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error("{0}")]
    Io(String),
}
