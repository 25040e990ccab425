//! File formats, checkpoints, run configuration, reports and the command-line
//! front end for the `fmbff-core` segmentation network.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
pub use fmbff_core as core;
