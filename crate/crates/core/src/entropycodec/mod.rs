//! Range coding of integer latents against discretized probability tables.

pub mod bitstream;
pub mod cdf;
pub mod range;

pub use bitstream::{Bitstream, Header};
pub use cdf::{build_cdf, CdfRow, CdfTable, PRECISION, TOTAL};
pub use range::{decode, encode, RangeDecoder, RangeEncoder};
