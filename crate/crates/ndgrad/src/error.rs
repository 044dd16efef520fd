use thiserror::Error;

/// Errors raised by tensor construction, graph operations and optimizers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("loss is not finite: {0}")]
    NonFinite(f64),
    #[error("parameter {0} requires grad but has no gradient")]
    MissingGrad(usize),
}

pub type Result<T> = std::result::Result<T, NdError>;
