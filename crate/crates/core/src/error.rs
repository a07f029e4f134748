use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampling produced a non-finite value {value} at node {node}")]
    Sampling { node: usize, value: f64 },

    #[error("stencil leaves the grid at node {node} along direction {direction:?}")]
    StencilOutOfDomain { node: usize, direction: Vec<i32> },

    #[error("inconsistent row at node {node}: weight vanishes but the source is {source_value}")]
    InconsistentRow { node: usize, source_value: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("expression error in `{expr}`: {msg}")]
    Expression { expr: String, msg: String },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
