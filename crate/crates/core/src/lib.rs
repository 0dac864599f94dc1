pub mod data;
pub mod distance;
pub mod error;
pub mod evaluation;
pub mod genomics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
