pub mod error;
pub mod linalg;
pub mod model;
pub mod schedule;
pub mod engine;
pub mod poisson;
pub mod stats;
pub mod covariance;
pub mod gauss;
pub mod rlapps;

pub use error::{Error, Result};
