//! Computational cannula microscopy toolkit.
//!
//! Simulates depth-resolved scrambled fluorescence measurements and
//! reconstructs them with a truncated-SVD baseline and small trained
//! convolutional networks.

pub mod diffcore;
mod error;
pub mod image;
pub mod kv;
pub mod linrecon;
pub mod metrics;
pub mod neurorecon;
pub mod opticsim;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
