//! Core of a hierarchical, non-causal state-space flow-matching network for
//! long-form multimodal-to-audio generation.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation: dense tensors with a reverse-mode tape, the state-space
//! kernels, similarity routing with chunk/dechunk, condition projections,
//! the flow-matching objective and sampler, the assembled model, a synthetic
//! multimodal episode generator and the evaluation metrics. File formats,
//! configuration parsing and the command line live in the `mmhnet` crate.

#![no_std]
#![allow(clippy::too_many_arguments)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod audit;
pub mod autodiff;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod flow;
pub mod hierarchy;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod routing;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Backward, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
