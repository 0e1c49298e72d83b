pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod prompts;
pub mod retrieval;
pub mod tpg;
pub mod train;

pub use error::{Error, Result};
