pub mod curvature;
pub mod error;
pub mod harness;
pub mod nn;
pub mod quadratic;
pub mod regularize;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
