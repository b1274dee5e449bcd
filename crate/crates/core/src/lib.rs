//! Masked generative sketch synthesis at desk scale: a VQ codec over sketch
//! images, a conditional token transformer, and the two-stage training and
//! iterative decoding pipeline around them.
//!
//! Core types are generic over the scalar; the aliases below fix `f32` for
//! training and inference, `f64` is used for gradient checks.

pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod masking;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod transformer;
pub mod vq;

pub use data::{GrayImage, PhotoSketchPair};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type VqCodec = vq::VqCodec<f32>;
pub type FeatureEncoder = conditioning::FeatureEncoder<f32>;
pub type Transformer = transformer::Transformer<f32>;
