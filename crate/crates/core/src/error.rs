use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("mixed partial requested with the same variable ({index}) twice")]
    SameVariable { index: usize },
    #[error("variable index {index} out of range for input dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("zero step in finite difference (h = {h}, k = {k})")]
    ZeroStep { h: f64, k: f64 },
    #[error("function evaluation failed: {0}")]
    Evaluation(String),
    #[error("need at least {needed} test samples, got {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("every sample coincides with the anchor in at least one tested coordinate")]
    AllSamplesDegenerate,
    #[error("activation {0} has no closed-form derivative network")]
    UnsupportedActivation(String),
    #[error("operands were recorded on different tapes")]
    TapeMismatch,
    #[error("derivative order too high: {0}")]
    DerivativeOrder(&'static str),
    #[error("dataset of {total} samples leaves an empty {which} split")]
    EmptySplit { total: usize, which: &'static str },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot build a balanced corpus: {0}")]
    UnsatisfiableBalance(String),
    #[error("threshold selection needs at least one non-separable record")]
    NoNegatives,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("no model file for function {id} at {}", path.display())]
    MissingModel { id: String, path: PathBuf },
    #[error("run at {} is incomplete: {hint}", path.display())]
    IncompleteRun { path: PathBuf, hint: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
