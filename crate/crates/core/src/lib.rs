//! Post-training quantization for hybrid convolution + transformer graphs.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and parallel calibration live in the `hyquant` crate.

#![no_std]

extern crate alloc;

pub mod bridge;
pub mod calib;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
