//! Algorithmic core for device-mismatch adaptation of acoustic scene
//! classifiers: a small differentiable-compute stack (dense tensors, layer
//! forward/backward, SGD with a cosine schedule), divergence losses with
//! analytic gradients, neural label embedding (NLE) learning, relational
//! teacher-student training, log-mel feature extraction, synthetic scene
//! signal generation, evaluation, and SKLD-based embedding analysis.
//!
//! The crate is `no_std`-compatible (with `alloc`); all file IO, the CLI,
//! and the on-disk formats live in the companion `nlekit` crate. Enable the
//! `parallel` feature to fan heavy inner loops out over a rayon pool;
//! results are bit-identical with or without it.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod ckpt;
pub mod divergence;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod nle;
pub mod optim;
mod parallel;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{CoreError, Result};
pub use real::Real;
pub use tensor::Tensor;
