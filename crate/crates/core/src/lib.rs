pub mod archive;
pub mod detector;
pub mod error;
pub mod eval;
pub mod memory;
pub mod nnkit;
pub mod seed;
pub mod synth;
pub mod video;

pub use error::{Error, Result};
