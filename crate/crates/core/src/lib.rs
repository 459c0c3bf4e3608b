pub mod dataio;
pub mod detection;
pub mod error;
pub mod jobs;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod refiner;
pub mod remapper;

pub use error::{Error, Result};
