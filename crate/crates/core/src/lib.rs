//! Estimation of individual advertising effects under multiple ordered
//! treatments, PEHE bound verification on synthetic ground truth, and a
//! leverage-rate bidding simulator.

pub mod bidding;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod ipm;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{AdamConfig, AdamState, Axis, Tape, Tensor, Var};
