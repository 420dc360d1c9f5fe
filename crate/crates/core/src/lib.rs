//! Desk-scale laboratory for UAV-assisted edge computing over wireless
//! body area networks: a discrete-time simulator, a hierarchical
//! multi-scale Transformer trajectory predictor, and a prediction-augmented
//! PPO agent that jointly steers the UAV and decides task offloading.

pub mod agent;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod env;
pub mod error;
pub mod geo;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod scenario;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
