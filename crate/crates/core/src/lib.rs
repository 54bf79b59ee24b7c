//! Q-matrix-based attentive knowledge tracing.
//!
//! The crate learns a binary skill-by-question q-matrix directly from
//! student interaction sequences with a monotonic-attention model, then
//! retrains on the binarized matrix to predict future responses. It ships
//! its own compact reverse-mode autodiff engine, data ingestion and
//! synthetic-data generation, the model itself, the two-phase training
//! loop, and q-matrix recovery scoring.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
