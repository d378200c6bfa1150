use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{op}: degenerate input{}: {reason}", fmt_location(.location))]
    Degenerate {
        op: &'static str,
        location: Option<Vec<usize>>,
        reason: String,
    },

    #[error("non-finite value in `{name}`{}", fmt_location(.location))]
    NonFinite {
        name: String,
        location: Option<Vec<usize>>,
    },

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("shape error for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint: {}", .checkpoint.display())]
    Divergence {
        epoch: usize,
        step: usize,
        checkpoint: PathBuf,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_location(loc: &Option<Vec<usize>>) -> String {
    match loc {
        Some(idx) => format!(" at {idx:?}"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Attaches a pipeline stage name to an error.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when a NaN or infinity was detected, at any stage.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Stage { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// runtime or numeric failures.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Dimension { .. }
            | Error::ParamShape { .. }
            | Error::Version { .. } => true,
            Error::Stage { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
