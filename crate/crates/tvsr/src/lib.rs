//! File formats, reports, datasets and the command line around `tvsr-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod nifti;
pub mod pgm;
pub mod report;

pub use error::{Error, Result};
