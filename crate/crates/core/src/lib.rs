pub mod boost;
pub mod cascade;
pub mod cli;
pub mod error;
pub mod geom;
pub mod haar;
pub mod raster;
pub mod samples;
pub mod scan;

pub use error::{Error, Result};
