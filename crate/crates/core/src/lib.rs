pub mod attention;
pub mod densify;
pub mod dscl;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
