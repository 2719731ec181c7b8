//! Depth-based 3D hand pose estimation with convolutional regressors, a
//! linear (PCA) pose prior embedded as a network bottleneck, and a cascaded
//! per-joint refinement stage.

pub mod engine;
pub mod error;

pub use error::{Error, Result};
pub mod pose;
pub mod preprocess;
pub mod prior;
pub mod netzoo;
pub mod data;
pub mod metrics;
pub mod refine;
pub mod pipeline;
pub mod cli;
