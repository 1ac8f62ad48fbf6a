pub mod calib;
pub mod cli;
pub mod entropycodec;
pub mod error;
pub mod eval;
pub mod fixedpoint;
pub mod geometry;
pub mod licnet;
pub mod tensor;

pub use error::{Error, Result};
