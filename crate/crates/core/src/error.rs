use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss does not depend on any differentiable input")]
    Detached,

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("cluster {cluster} is empty")]
    EmptyCluster { cluster: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }
}
