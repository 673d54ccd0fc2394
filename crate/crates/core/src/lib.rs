//! Global, Local and Flexible attention over a small recurrent
//! encoder-decoder, with per-step vision-span metering.

pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
