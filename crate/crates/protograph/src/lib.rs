//! File formats, the synthetic generator and the command-line driver built on
//! `protograph-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod run_config;
pub mod synth;
pub mod volume;
