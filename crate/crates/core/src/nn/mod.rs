//! From-scratch convolutional network stack: tensors, layers, encoders, and
//! the multi-ROI / single-ROI regression models, with exact analytic
//! gradients and bit-reproducible execution.

pub mod encoders;
pub mod layers;
pub mod model;
pub mod tensor;

use thiserror::Error;

use crate::geometry::RoiKind;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("spatial size {height}x{width} below the encoder minimum")]
    SpatialTooSmall { height: usize, width: usize },
    #[error("non-finite activation or loss")]
    NonFiniteActivation,
    #[error("missing ROI {0} in batch")]
    MissingRoi(RoiKind),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),
}

pub use encoders::{build_encoder, Encoder, EncoderSpec, ENCODER_NAMES};
pub use layers::{Grads, ParamSet, ParamTensor};
pub use model::{
    average_mse_loss, head_mse, MultiHeadPrediction, MultiRoiModel, RoiBatch, SingleRoiModel,
    N_VERTEBRAE,
};
pub use tensor::{Mat, Tensor4};
