use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),

    #[error("invalid symbol set: {0}")]
    InvalidSymbolSet(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("audio too short: {got} samples, need at least {min}")]
    AudioTooShort { got: usize, min: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("zero-energy signal: {0}")]
    ZeroEnergy(&'static str),

    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite score at frame {frame}")]
    NonFiniteScore { frame: usize },

    #[error("bigram row `{row}` is not normalized (sum {sum})")]
    UnnormalizedBigram { row: String, sum: f64 },

    #[error("alignment is inconsistent with the topology: {0}")]
    BadAlignment(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("missing files for ids: {0:?}")]
    MissingFiles(Vec<String>),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
