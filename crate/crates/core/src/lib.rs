//! Sampled-data stabilization of feedforward systems by saturated
//! forwarding feedback: design constants, grid certificates, controllers,
//! zero-order-hold simulation and delay prediction.

pub mod controller;
pub mod design;
pub mod error;
pub mod linalg;
pub mod predictor;
pub mod simulator;
pub mod system;

pub use error::{Error, Result};
