pub mod cli;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod mesh;
pub mod metrics;
pub mod motion;
pub mod net;
pub mod params;
pub mod skeleton;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
