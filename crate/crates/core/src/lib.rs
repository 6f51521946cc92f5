//! Residual matrix product state classifiers.
//!
//! This crate implements image classifiers built from chains of per-pixel
//! linear updates on a hidden vector — the "matrix product" family — in a
//! residual parameterization, together with everything needed to study
//! them:
//!
//! * [`models`] — the three parameterizations (simple residual,
//!   activated residual, two-channel product layers), forward
//!   evaluation, the exact rewriting between residual and product form,
//!   and near-identity initialization;
//! * [`data`] — IDX image/label datasets, splits, and mini-batching;
//! * [`training`] — softmax cross-entropy, hand-derived reverse-mode
//!   gradients, SGD/Adam, and the epoch loop with metrics;
//! * [`pruning`] — global magnitude masks over the per-pixel stack and
//!   prune/retrain schedules;
//! * [`expansion`] — the exact polynomial expansion of a simple residual
//!   model in its pixel values: per-order terms, truncated evaluation,
//!   and truncated training;
//! * [`diagnostics`] — channel-norm profiles, hidden-trajectory export,
//!   and initialization-stability sweeps;
//! * [`checkpoint`] — a bit-exact binary parameter format;
//! * [`config`] — strict JSON run configuration.
//!
//! All numeric code is generic over the [`scalar::Scalar`] precision;
//! the aliases below pin the two supported instantiations.  `f64` is the
//! precision used by the bundled CLI and all recorded results.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod expansion;
pub mod linalg;
pub mod models;
pub mod pruning;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` instantiations (the default precision).
pub type Matrix64 = linalg::Matrix<f64>;
pub type Vector64 = linalg::Vector<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type ModelParams64 = models::ModelParams<f64>;

/// `f32` instantiations.
pub type Matrix32 = linalg::Matrix<f32>;
pub type Vector32 = linalg::Vector<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type ModelParams32 = models::ModelParams<f32>;
