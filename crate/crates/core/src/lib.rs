pub mod augment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod imageio;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
