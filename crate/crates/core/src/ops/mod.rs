//! Differentiable operations recorded on a [`Tape`](crate::Tape).
//!
//! All operations are `impl Tape` methods. Shapes are aligned explicitly: the
//! only implicit broadcast is between a one-element tensor and any other tensor.

mod contrastive;
mod conv;
mod elementwise;
mod linalg;
mod normalize;
mod reduce;
mod shape;
mod softmax;

pub use conv::{conv3d_output_len, conv3d_shape, Conv3dSpec};
pub(crate) use linalg::matmul_raw as linalg_matmul;
pub(crate) use softmax::softmax_slice as softmax_values;
