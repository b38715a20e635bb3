//! Self-supervised feature learning by predicting which geometric
//! transformation was applied to an image, with frozen and fine-tuned
//! transfer to CIFAR-10 object recognition.

pub mod error;
pub mod checkpoint;
pub mod dataset;
pub mod downstream;
pub mod experiment;
pub mod geometry;
pub mod models;
pub mod nn;
pub mod pretext;
pub mod report;
pub mod synthetic;
pub mod verify;

pub use error::{Error, Result};
