//! Concept-partitioned variational autoencoders for driving scenes, with
//! latent-space temporal prediction and the diagnostics used to compare them.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
