//! Voxel-anchored structured Gaussian splatting with multimodal query rendering.
//!
//! A scene is a sparse voxel scaffold; every occupied cell holds one anchor
//! whose latent feature decodes, through shared MLP heads, the geometry,
//! appearance, and semantic query of a small batch of Gaussians. Rendering is
//! differentiable front-to-back splatting of RGB plus query channels; query
//! pixels attend over a frozen multimodal memory bank to reconstruct
//! foundation-model feature maps. Anchors grow and get pruned from gradient,
//! latent, and rendering-contribution statistics.
//!
//! All numeric code is generic over the scalar type: `f64` for gradient
//! checking and oracle tests, `f32` for training. See [`TrainScalar`] and
//! [`CheckScalar`].

mod bytesio;
pub mod config;
pub mod decoders;
pub mod diffcore;
pub mod error;
pub mod featio;
pub mod lifecycle;
pub mod math;
pub mod membank;
pub mod pipeline;
pub mod rasterizer;
pub mod real;
pub mod scaffold;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

/// Scalar used for training runs.
pub type TrainScalar = f32;
/// Scalar used for gradient checks and high-precision oracles.
pub type CheckScalar = f64;

/// Tensor aliases for the two supported precisions.
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
