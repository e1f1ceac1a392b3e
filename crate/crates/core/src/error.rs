use std::path::PathBuf;

use thiserror::Error;

use crate::assignment::MatchMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty matching problem ({targets} targets, {proposals} proposals)")]
    EmptyProblem { targets: usize, proposals: usize },

    #[error("one-to-one matching infeasible: {targets} targets but only {proposals} proposals")]
    Infeasible { targets: usize, proposals: usize },

    #[error("degenerate mixture fit: {0}")]
    DegenerateFit(String),

    #[error("loss flavor {flavor:?} supplied for a {stage:?} iteration")]
    StageMismatch { stage: MatchMode, flavor: MatchMode },

    #[error("config error at `{key}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { key: String, line: Option<usize>, message: String },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }
}
