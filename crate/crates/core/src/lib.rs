pub mod archive;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod oos;
pub mod predictor;
pub mod resize;

pub use error::{Error, Result};
