use serde_json::json;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Exit status of a failed command.
pub mod exit {
    pub const ERROR: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CHECK_FAILED: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sgvqa_core::Error),
    #[error("{path}: {reason}")]
    Config { path: String, reason: String },
    #[error("missing {what} at {path}; {hint}")]
    Missing { what: &'static str, path: String, hint: &'static str },
    #[error("{path} holds outputs of another config ({found}); rerun with --force to replace them")]
    Stale { path: String, found: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("gradient check failed: max relative error {max_rel_err:e} exceeds {tolerance:e} (report at {report})")]
    CheckFailed { max_rel_err: f64, tolerance: f64, report: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn kind(&self) -> &'static str {
        use sgvqa_core::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Config { .. } => "config",
                E::Diverged { .. } => "diverged",
                E::Io { .. } => "io",
                E::Format { .. } | E::Parse(_) => "format",
                E::VocabMismatch(_) => "vocab_mismatch",
                _ => "internal",
            },
            CliError::Config { .. } => "config",
            CliError::Missing { .. } => "missing_prerequisite",
            CliError::Stale { .. } => "stale_outputs",
            CliError::Io { .. } => "io",
            CliError::CheckFailed { .. } => "check_failed",
            CliError::Usage(_) => "usage",
        }
    }

    /// The config path or file the error is about.
    pub fn path(&self) -> Option<String> {
        use sgvqa_core::Error as E;
        match self {
            CliError::Core(E::Config { path, .. } | E::Io { path, .. } | E::Format { path, .. }) => Some(path.clone()),
            CliError::Config { path, .. }
            | CliError::Missing { path, .. }
            | CliError::Stale { path, .. }
            | CliError::Io { path, .. } => Some(path.clone()),
            CliError::CheckFailed { report, .. } => Some(report.clone()),
            _ => None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::CheckFailed { .. } => exit::CHECK_FAILED,
            CliError::Core(sgvqa_core::Error::Diverged { .. }) => exit::DIVERGED,
            _ => exit::ERROR,
        }
    }

    /// `{"error": {"kind", "message", "path"?}}`
    pub fn envelope(&self) -> serde_json::Value {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        if let Some(p) = self.path() {
            body["path"] = json!(p);
        }
        json!({ "error": body })
    }
}
