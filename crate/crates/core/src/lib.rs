//! Ensemble Kalman filtering with mollified analysis increments on a
//! slow-fast extension of the Lorenz-96 model.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod integrate;
pub mod model;
pub mod obsmodel;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
