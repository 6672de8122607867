//! File formats, parallel calibration and the `hyquant` command line on top
//! of [`hyquant_core`].

pub mod blob;
pub mod cli;
pub mod data;
pub mod manifest;
pub mod parallel;
pub mod qconfig;
pub mod report;

pub use hyquant_core as core;
