//! Continual test-time adaptation that switches per instance between full
//! tuning and adapter-only tuning, driven by an EMA-thresholded
//! teacher/student segmentation loss, with masked image modeling as an
//! auxiliary task in both source training and adaptation.

pub mod ctta;
pub mod diffmath;
pub mod error;
pub mod harness;
pub mod model;
pub mod source_trainer;
pub mod streams;

pub use error::{Error, Result};
