pub mod base;
pub mod data;
pub mod error;
pub mod flow;
pub mod infer;
pub mod numeric;
pub mod par;
pub mod sdr;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
