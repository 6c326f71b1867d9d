use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("field has {got} values but mesh has {expected} nodes")]
    MeshMismatch { expected: usize, got: usize },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("degenerate element {element}: measure {measure:e}")]
    DegenerateElement { element: usize, measure: f64 },

    #[error("dimension mismatch: system is {expected}, vector is {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("constraint violated at node {node}: {what} (magnitude {magnitude:e})")]
    ConstraintViolation {
        node: usize,
        what: &'static str,
        magnitude: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("box constraint violated at node {node}, t = {time}: magnitude {magnitude:e}")]
    StateViolation { node: usize, time: f64, magnitude: f64 },
}
