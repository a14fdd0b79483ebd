//! Leave-one-magnification-out evaluation of magnification-robust
//! histopathology classifiers: patient-disjoint splits, a small reverse-mode
//! autodiff engine, gradient-reversal and GAN-augmented training, sparse
//! embedding signatures and the usual binary metrics.

pub mod augment;
pub mod autodiff;
pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod signature;
pub mod splitting;
pub mod training;

pub use error::{Error, Result};
