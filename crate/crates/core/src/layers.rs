//! Learnable tensors shared by the model components and their initialization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math;
use crate::ops::Conv3dSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Deterministic generator used for every initialization and shuffle.
pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    Rng64::seed_from_u64(seed)
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// He-uniform bound for a ReLU layer with the given fan-in.
pub fn he_bound(fan_in: usize) -> f64 {
    math::sqrt(6.0 / fan_in as f64)
}

/// Anything holding learnable tensors, visited in a fixed order.
pub trait Parameters {
    /// Named tensors in canonical order.
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    /// The same tensors, mutably, in the same order.
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Weight and bias of a 3-D convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
}

impl ConvParams {
    /// He-uniform weights `[c_out, c_in/groups, k, k, k]`, zero bias.
    pub fn init(c_out: usize, cin_per_group: usize, kernel: usize, rng: &mut Rng64) -> Self {
        let shape = [c_out, cin_per_group, kernel, kernel, kernel];
        let fan_in = cin_per_group * kernel * kernel * kernel;
        Self {
            weight: uniform(&shape, he_bound(fan_in), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConv {
        BoundConv {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl BoundConv {
    pub fn apply(&self, tape: &mut Tape, x: Var, spec: Conv3dSpec) -> Result<Var> {
        tape.conv3d(x, self.weight, self.bias, spec)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Weight `[n_out, n_in]` and bias `[n_out]` of a fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl DenseParams {
    /// Uniform weights with bound `1/sqrt(n_in)`, zero bias.
    pub fn init(n_out: usize, n_in: usize, rng: &mut Rng64) -> Self {
        Self {
            weight: uniform(&[n_out, n_in], 1.0 / math::sqrt(n_in as f64), rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDense {
        BoundDense {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl BoundDense {
    /// Applies the layer to a vector.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dense(x, self.weight, self.bias)
    }

    /// Applies the layer to every row of a matrix.
    pub fn apply_rows(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

pub(crate) fn push_pair<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, w: &'a Tensor, b: &'a Tensor) {
    out.push((format!("{prefix}.weight"), w));
    out.push((format!("{prefix}.bias"), b));
}
