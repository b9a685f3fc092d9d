use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("loss is detached from every trainable parameter")]
    EmptyGradient,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid routing: {0}")]
    Routing(String),

    #[error("invalid sub-model spec: {0}")]
    Spec(String),

    #[error("training diverged during {stage}: {detail}")]
    Divergence { stage: String, detail: String },

    #[error("budget infeasible on {dimension}: requires {required}, available {available}")]
    Infeasible {
        dimension: &'static str,
        required: u64,
        available: u64,
    },

    #[error("stale update from device {device}: built on version {got}, cloud is at {expected}")]
    Stale { device: usize, expected: u64, got: u64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stable, machine-parsable error class used by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::EmptyGradient => "gradient",
            Error::Config(_) => "config",
            Error::Routing(_) => "routing",
            Error::Spec(_) => "spec",
            Error::Divergence { .. } => "divergence",
            Error::Infeasible { .. } => "infeasible",
            Error::Stale { .. } => "stale",
            Error::EmptyDataset(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Stage { source, .. } => source.class(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
