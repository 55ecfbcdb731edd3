//! Optimizers that normalize each class's gradient separately, for training
//! classifiers on class-imbalanced data, together with the diagnostics and
//! convergence-bound checkers that go with them.
//!
//! Module map:
//! - [`tensor`], [`rng`]: dense `f64` tensors, vector helpers, seeded streams.
//! - [`autodiff`]: reverse-mode gradients over a small static graph.
//! - [`model`]: softmax classifiers and per-class losses/gradients.
//! - [`data`]: datasets, imbalance profiles, Gaussian mixtures, batch plans.
//! - [`optim`]: update rules, step-size schedules, the training loop.
//! - [`diagnostics`]: gradient geometry, recall, dip detection, run logs.
//! - [`theory`]: quadratic test problems and bound checkers.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Per-class loops index several parallel arrays by class.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use rng::{SeededRng, Stream};
pub use tensor::Tensor;
