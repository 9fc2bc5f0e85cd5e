pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hashmodel;
pub mod index;
pub mod matrix;
pub mod mixup;
pub mod pipeline;

pub use error::{Error, Result};
