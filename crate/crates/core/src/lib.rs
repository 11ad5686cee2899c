//! Training-dynamics laboratory for two-layer ReLU networks: exact models and
//! initializations, GD/SGD with the theory's learning-rate schedules, neuron
//! partition tracking and numerical certificates for the analytic bounds.

pub mod certificates;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod models;
pub mod partition;
pub mod prm;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
