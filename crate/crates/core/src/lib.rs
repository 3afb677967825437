//! Estimation of lumbar-spine bone mineral density from frontal chest
//! radiographs: landmark-anchored ROI extraction, a multi-ROI regression
//! network with a shared encoder, training/evaluation machinery, model
//! ensembling, and a synthetic phantom oracle for end-to-end verification.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`) through
//! [`scalar::Real`]; concrete aliases for the common instantiations live at
//! the crate root.

pub mod augment;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod ensemble;
pub mod geometry;
pub mod image;
pub mod landmarks;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod plot;
pub mod repro;
pub mod scalar;
pub mod split;
pub mod train;

pub use scalar::Real;

/// Scalar used by the command-line training pipeline.
pub type DefaultScalar = f32;

/// Common concrete instantiations.
pub type ImageF32 = image::ImageBuf<f32>;
pub type ImageF64 = image::ImageBuf<f64>;
pub type MultiRoiModelF32 = nn::MultiRoiModel<f32>;
pub type MultiRoiModelF64 = nn::MultiRoiModel<f64>;
pub type SingleRoiModelF32 = nn::SingleRoiModel<f32>;
pub type SingleRoiModelF64 = nn::SingleRoiModel<f64>;
