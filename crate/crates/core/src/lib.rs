pub mod asm;
pub mod colorspace;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
