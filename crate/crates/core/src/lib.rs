//! Dynamic temporal pyramid network for temporal activity detection.
//!
//! The pipeline runs in order through the modules below: [`sampling`] turns a
//! frame sequence into a multi-rate feature pyramid, [`model`] maps it to
//! per-anchor predictions, [`postprocess`] decodes and suppresses them, and
//! [`eval`] scores detections against ground truth. [`train`] fits the model
//! and [`verify`] checks every gradient against finite differences.


pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io_formats;
pub mod model;
pub mod postprocess;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
