//! Multi-decoder segmentation network (MD-Net) with multi-denoising
//! inputs: volumetric data types, preprocessing, augmentation, the model
//! graph, losses, training, post-processing, uncertainty maps, and the
//! evaluation metric suite.
//!
//! All numeric code is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below pick concrete instantiations.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod scalar;
pub mod selftest;
pub mod train;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar used for training and inference.
pub type TrainScalar = f32;
/// Scalar used for high-precision verification (gradient checks).
pub type CheckScalar = f64;

pub type Volume32 = volume::MultiModalVolume<f32>;
pub type Volume64 = volume::MultiModalVolume<f64>;
pub type ProbabilityMaps32 = volume::ProbabilityMapSet<f32>;
pub type ProbabilityMaps64 = volume::ProbabilityMapSet<f64>;
