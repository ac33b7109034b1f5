pub mod autodiff;
pub mod consistency;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod image;
pub mod models;
pub mod netpbm;
pub mod photometric;
pub mod tps;
pub mod warp;

#[cfg(test)]
mod testutil;

pub use autodiff::{Gradients, SparseResample, Tape, Tensor};
pub use error::{Error, Result};
