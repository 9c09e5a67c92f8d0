//! Deterministic simulator and solver library for adaptable computing-network
//! convergence: joint service-instance placement and SRv6 path selection.

pub mod agents;
pub mod config;
pub mod context;
pub mod error;
pub mod placement;
pub mod predictor;
pub mod rng;
pub mod routing;
pub mod services;
pub mod state;
pub mod topology;

pub use error::{Error, Result};
pub mod sim;
