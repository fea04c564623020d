//! Class rectification loss (CRL) for class-imbalanced multi-label learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`model`]: shared-trunk, per-attribute-branch MLP classifier.
//! - [`profile`]: per-batch class histograms, minority classes and the
//!   training-set imbalance measure that scales the CRL weight.
//! - [`mining`]: top-κ hard positive/negative mining at class and instance
//!   level, plus triplet and pair construction.
//! - [`loss`]: cross-entropy, the relative/absolute/distribution CRL families
//!   and the imbalance-adaptive combined objective.
//! - [`baselines`]: over/down-sampling, cost-sensitive weights and threshold
//!   adjustment.
//! - [`metrics`]: confusion matrices, per-class sensitivity and class-balanced
//!   accuracy.
//! - [`data`] and [`datagen`]: the dataset type, its text format, synthetic
//!   blobs and power-law subsampling.
//! - [`train`], [`config`] and [`study`]: the training harness and the
//!   controlled sweeps.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod data;
pub mod datagen;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod profile;
pub mod scenario;
pub mod study;
pub mod train;

pub use error::{Error, Result};
