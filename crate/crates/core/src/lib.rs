pub mod cli;
pub mod config;
pub mod data;
pub mod dtw;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod sda;
pub mod segment;
pub mod train;

pub use error::{Error, Result};
