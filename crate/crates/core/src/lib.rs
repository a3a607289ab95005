//! Trajectory generation and planning with implicit maximum likelihood
//! estimation.
//!
//! The crate covers the full pipeline: synthetic and recorded trajectory
//! data, a FiLM-conditioned generator trained with reward-weighted
//! conditional IMLE, a DDPM baseline, safety costs, sampling planners and
//! evaluation metrics.

pub mod costs;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod imle;
pub mod metrics;
pub mod nn;
pub mod planners;
pub mod sim;
pub mod trajectory;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use generator::{GeneratorDims, GeneratorParams, LatentCode};
pub use trajectory::{Context, Trajectory, WeightedSample};
