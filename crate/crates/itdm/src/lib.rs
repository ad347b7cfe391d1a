//! In-training distribution matching (ITDM) for small classifier networks.
//!
//! Plain SGD takes an exact descent step on one noisy mini-batch. This crate
//! implements the alternative: each update augments the cross-entropy
//! gradient with the gradient of a kernel MMD loss that pulls the latent
//! features of the current mini-batch towards those of a second,
//! independently sampled mini-batch. Matching can be joint (one MMD term over
//! the full batches) or class-conditional (per-class MMD terms averaged over
//! the classes present in both batches).
//!
//! Everything is built from scratch on a dense `f64` tensor with manual
//! backpropagation, so seeded runs replay bit-identically.
//!
//! Module map:
//! - [`tensor`], [`rng`]: dense arrays and the deterministic PRNG
//! - [`kernels`]: Gaussian kernels, median bandwidth heuristic, kernel bank
//! - [`mmd`]: biased MMD estimator, match losses, analytic feature gradients
//! - [`nn`]: MLP / small-CNN models, manual backprop, SGD with momentum
//! - [`data`]: IDX ingestion, synthetic blobs, the dual mini-batch sampler
//! - [`trainer`]: the training loop and evaluation
//! - [`cli`]: single-run and lambda-grid experiment drivers
//! - [`gradcheck`]: finite-difference helpers for validating gradients

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mmd;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
