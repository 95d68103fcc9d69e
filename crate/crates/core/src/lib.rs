pub mod agents;
pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod seed;
pub mod spectral;
pub mod text;

pub use error::{Error, Result};
