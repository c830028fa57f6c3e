//! Cross-scale attention multi-instance learning.
//!
//! The crate covers the whole desk-scale pipeline: synthetic multi-scale
//! toy data, a label-free patch embedder, per-region phenotype clustering,
//! bag construction, the cross-scale attention MIL network on a small
//! reverse-mode autodiff tape, training, evaluation metrics, and attention
//! map export.

pub mod attnmap;
pub mod bagging;
pub mod container;
pub mod embedder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kmeans;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod tape;
pub mod tensor;
pub mod toydata;
pub mod trainer;

pub use error::{Error, Result};
