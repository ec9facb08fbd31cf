use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible split: no training combination left with component {component} = {value}")]
    Infeasible { component: usize, value: usize },
    #[error("sample error: {0}")]
    Sample(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("undefined conditional: {0}")]
    UndefinedConditional(String),
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
