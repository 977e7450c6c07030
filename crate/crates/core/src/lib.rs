//! Online video grounding with hybrid-modal queries.
//!
//! The crate provides a parameter-as-memory sequence layer with test-time writes, an
//! anchor-based streaming grounding network with manual gradients, distillation
//! training, timeliness-aware evaluation metrics and a synthetic data generator.

pub mod config;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pml;
pub mod streaming;
pub mod trainer;

pub use error::{Error, Result};
