pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod partition;
pub mod routing;
pub mod trainer;

pub use error::{Error, Result};
