//! Geometry-aware classification: learning an annotation-free quality score
//! as the magnitude of a classifier's feature vector.

pub mod apps;
pub mod binning;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod recipes;
pub mod sketch;
pub mod stats;
pub mod steer;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
