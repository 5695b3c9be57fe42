//! Core library for reference-guided transformer inpainting.
//!
//! The pipeline moves an image with holes through five stages: a small
//! convolutional backbone produces feature maps, an encoder refines texture
//! references, a coarse-fill pass seeds every hole patch from visible
//! content, a decoder sharpens those patches against the references, and a
//! probabilistic selection loop commits one patch per step until the image
//! is whole again. Everything runs on an f64 tape ([`tensor::Graph`]) so
//! every stage is differentiable end to end.

pub mod backbone;
pub mod cache;
pub mod cfa;
pub mod config;
pub mod decoder;
pub mod diffusion;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod ledger;
pub mod loss;
pub mod model;
pub mod patch;
pub mod rng;
pub mod selftest;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
