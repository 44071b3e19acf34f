//! Structure-aware flow generation for body reshaping: priors, SASA generator,
//! warping, losses, training and inference.

pub mod container;
pub mod data;
pub mod error;
pub mod flow;
pub mod generator;
pub mod imaging;
pub mod keypoints;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod resample;
pub mod sasa;
pub mod scalar;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Real;

/// Training and inference run in single precision.
pub type Image32 = imaging::Image<f32>;
pub type FlowField32 = flow::FlowField<f32>;
pub type Generator32 = generator::Generator<f32>;
pub type SamplePair32 = data::SamplePair<f32>;

/// Double precision, used for gradient checks.
pub type Image64 = imaging::Image<f64>;
pub type FlowField64 = flow::FlowField<f64>;
pub type Generator64 = generator::Generator<f64>;
