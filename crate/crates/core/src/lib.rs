pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experience;
pub mod filter;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod tracer;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
