//! Sparsification of Bayesian neural networks through variational
//! automatic relevance determination.
//!
//! The crate covers the whole pipeline: a small f64 tensor library with a
//! reverse-mode tape, Bayesian dense/conv layers with factorized Gaussian
//! posteriors trained through the local reparameterization trick, the ARD,
//! ARD-dropout, Sparse VD and Gamma MAP-II regularizers, an Adam-based
//! training loop, and trimming/compression accounting.
//!
//! Kernels run on rayon when the `parallel` feature is enabled (the
//! default). Every kernel partitions work by output element and keeps a
//! fixed reduction order, so results are bit-identical with and without
//! the feature.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bayes_nn;
pub mod data_io;
mod error;
pub mod objectives;
pub mod par;
pub mod quadrature;
pub mod rng;
pub mod sparsify;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
