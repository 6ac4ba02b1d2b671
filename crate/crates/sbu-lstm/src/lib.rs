//! From-scratch recurrent sequence-learning engine built around a stacked
//! bidirectional/unidirectional LSTM (SBU-LSTM) for multi-location time-series
//! prediction.
//!
//! The stack is: optional masking of missing timesteps, a bidirectional LSTM
//! first layer, optional middle recurrent layers, a unidirectional LSTM last
//! layer, and a dense projection when the last hidden width differs from the
//! output width. Everything is double precision and deterministic per seed:
//! forward, backward, initialization, data generation, and training.

pub mod cells;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
