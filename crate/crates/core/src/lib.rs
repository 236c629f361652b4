//! Wasserstein-based selection and weighting of source classes for few-shot
//! transfer, with a small training pipeline and numeric checks of the
//! accompanying generalization bounds.

pub mod bounds;
pub mod data;
pub mod distance;
pub mod error;
pub mod experiment;
pub mod ot;
pub mod pipeline;
pub mod select;
pub mod simplex;
pub mod sinkhorn;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
