//! Stochastic video prediction with separate appearance and motion latents.
//!
//! A frame is predicted twice per step: directly in pixel space and by
//! warping the previous frame with a predicted flow. A learned mask fuses the
//! two. See the README for the command-line workflow.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod rollout;
pub mod tensor;
pub mod warp;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{ImageSet, Video};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, ReconWeights};
pub use model::{GaussianParams, Model, ModelConfig, Variant};
pub use rollout::RolloutConfig;
pub use tensor::{Real, Tensor};
