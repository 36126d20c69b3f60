//! Hierarchical prototype graph networks for volumetric classification.
//!
//! This crate is the allocation-only (`no_std` + `alloc`) numerical core:
//!
//! * [`tape`] and [`ops`]: dense `f64` tensors with reverse-mode differentiation,
//!   including grouped 3-D convolution.
//! * [`backbone`]: patch embedding plus depthwise/pointwise mixer blocks.
//! * [`prototype`]: channel peak descriptors, k-means, the three-level prototype
//!   hierarchy, cluster concentration and the node/edge contrastive losses.
//! * [`graph`]: self-attention adjacency, symmetric normalization and GCN layers.
//! * [`model`], [`optim`], [`metrics`], [`train`]: the joint objective, SGD with
//!   momentum, evaluation metrics and the deterministic training loop.
//!
//! File formats, the synthetic data generator and the command-line interface live
//! in the `protograph` companion crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backbone;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod math;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod prototype;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
