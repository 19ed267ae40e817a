//! Tensor-network compression of weight matrices.
//!
//! The crate is organised along the compression pipeline:
//!
//! * [`tensor`] and [`svd`]: dense tensors, unfoldings, contraction and a
//!   deterministic one-sided Jacobi SVD.
//! * [`decomp`]: Tucker, tensor-train and tensor-ring decompositions, rank
//!   selection and parameter accounting.
//! * [`sensitivity`]: patch partitioning, spectral/magnitude features, probe
//!   measurements and a small perceptron predicting compression sensitivity.
//! * [`planner`]: global parameter-budget allocation over patches.
//! * [`pipeline`]: applying a plan to a model, activation-aware healing and
//!   quality evaluation.
//! * [`inference`]: factor-form application of compressed layers with
//!   exhaustive contraction ordering and exact FLOP accounting.
//! * [`specdec`]: lossless draft/verify speculative sampling over Markov
//!   language models, with an exact enumeration oracle.
//!
//! Everything here is `no_std` + `alloc`; file formats and the CLI live in the
//! `minima` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod decomp;
pub mod error;
pub mod inference;
mod linalg;
mod math;
pub mod model;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod sensitivity;
pub mod specdec;
pub mod svd;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
