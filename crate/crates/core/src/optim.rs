//! Stochastic gradient descent with classic momentum and L2 weight decay.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter tensor in canonical order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`, for every parameter tensor.
/// Buffers are created as zeros on the first call.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::Invalid(format!(
            "optimizer holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("parameter {:?}, gradient {:?}, buffer {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
