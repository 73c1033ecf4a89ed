use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: vector norm {norm:e} below floor 1e-12")]
    DegenerateNorm { op: &'static str, norm: f64 },

    #[error("{op}: reduction over an empty set")]
    Empty { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("scene placement failed after {0} attempts")]
    Placement(usize),

    #[error("augmentation left {0} objects (need at least 2)")]
    TooFewObjects(usize),

    #[error("template `{0}` cannot be instantiated on this scene")]
    Unsatisfiable(&'static str),

    #[error("cannot parse question: {0}")]
    Parse(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged { epoch: usize, step: usize, what: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}
