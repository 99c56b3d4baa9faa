//! Predictive sparse decomposition toolkit.
//!
//! Learns an overcomplete linear basis jointly with a feed-forward regressor
//! that predicts sparse codes in a single pass, and provides the supporting
//! machinery: exact basis-pursuit solvers, proximal-gradient inference, patch
//! extraction and preprocessing, and an evaluation harness for fidelity
//! (SNR), sparsity, speed, and temporal stability measurements.

pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{PsdError, Result};
