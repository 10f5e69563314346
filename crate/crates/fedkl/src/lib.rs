//! Desk-scale federated-learning laboratory for studying what shared
//! gradients reveal about private training data, and how a key-lock
//! normalization module hides it.
//!
//! The crate provides:
//!
//! - [`tensor`]: a minimal dense `f64` tensor (matmul, 2-D cross-correlation,
//!   reductions) with shape-checked, NaN-rejecting operations;
//! - [`layers`]: forward and hand-derived backward passes for linear, ReLU,
//!   sigmoid, batch-norm, convolution and softmax/cross-entropy;
//! - [`keylock`]: the defense — batch-norm scale/shift generated from a
//!   private key by two private affine lock maps;
//! - [`model`]: tiny MLP/CNN assemblies with a parameter registry split into
//!   shareable and lock-private sets;
//! - [`fl`]: a deterministic federated simulator (FedAvg and FedKL rounds);
//! - [`attack`]: the honest-but-curious server's toolkit — analytic label
//!   inference, closed-form first-layer input reconstruction, and iterative
//!   gradient-matching (DLG-style) reconstruction under four
//!   information-sharing scenarios;
//! - [`metrics`]: MSE / PSNR / SSIM reconstruction scoring;
//! - [`data`]: IDX (MNIST-compatible) loading, a synthetic blob generator,
//!   and PPM image export;
//! - [`experiment`]: config-driven train / attack / eval / report runs used
//!   by the `fedkl` binary.
//!
//! Start with the examples (`cargo run --release --example dlg_mlp`) — there
//! is one per major capability.

pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod gradcheck;
pub mod keylock;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
