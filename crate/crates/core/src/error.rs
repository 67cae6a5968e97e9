use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// One violated invariant of an [`ArchitectureSpec`](crate::config::ArchitectureSpec).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for SpecIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecIssues(pub Vec<SpecIssue>);

impl fmt::Display for SpecIssues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,
    #[error("empty vector")]
    EmptyVector,
    #[error("non-finite function value at coordinate {index}")]
    NonFinite { index: usize },
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("data length {got} does not match shape {rows}x{cols}")]
    ShapeData { rows: usize, cols: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidSpec(SpecIssues),
    #[error("layer index {index} out of range 0..={depth}")]
    LayerOutOfRange { index: usize, depth: usize },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("fanout exceeds expert count: f={fanout} > s={pool}")]
    FanoutExceedsPool { fanout: usize, pool: usize },
    #[error("tree/spec mismatch: {0}")]
    TreeMismatch(String),
    #[error("stale trace: bank changed since the forward pass")]
    StaleTrace,
    #[error("rank mismatch: {0}")]
    RankMismatch(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("enumeration cap exceeded: {count} trees > cap {cap}")]
    CapExceeded { count: String, cap: u64 },
    #[error("parameter vector length {got} does not match bank size {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }
}
