//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends a node holding its output value, its parents and a
//! backward rule. [`Tape::backward`] walks the nodes in reverse execution order
//! and accumulates `∂loss/∂node` into every node that requires a gradient. A
//! node that feeds several consumers receives the sum of their contributions.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a Tensor,
    /// Which inputs actually need a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// A backward rule returns one optional gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            branch_hash: FNV_OFFSET,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a tensor that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push("leaf", value, Vec::new(), None, true)
    }

    /// Adds a tensor treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, Vec::new(), None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `var`.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn grad_or_zeros(&self, var: Var) -> Tensor {
        self.grad(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()))
    }

    /// Records an operation. The output must be finite.
    pub fn record(
        &mut self,
        op: &'static str,
        parents: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        let backward = requires_grad.then_some(backward);
        Ok(self.push(op, value, parents, backward, requires_grad))
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Mixes a non-smooth branch decision (ReLU side, clamp, floor) into the
    /// tape's branch signature.
    pub fn note_branch(&mut self, taken: bool) {
        self.branch_hash ^= u64::from(taken);
        self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
    }

    /// Hash of every branch decision taken so far. Two evaluations with equal
    /// signatures lie on the same smooth piece of a piecewise-smooth function.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(rule) = &node.backward {
                let ctx = BackwardCtx {
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect(),
                };
                let parent_grads = rule(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    if !g.is_finite() {
                        return Err(Error::NonFinite { op: node.op });
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }

        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }
}
