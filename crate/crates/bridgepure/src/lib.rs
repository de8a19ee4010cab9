//! File formats, experiment runner and command line for the purification
//! toolkit. The numerical work lives in `bridgepure-core`.

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod imageio;
pub mod plots;

pub use error::{Error, Result};
