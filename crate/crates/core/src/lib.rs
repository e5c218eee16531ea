//! Discrete mesh tokens for human pose and shape estimation.
//!
//! Canonical body meshes are compressed by a vector-quantized mesh autoencoder
//! into a short sequence of codebook indices ([`vqvae`]). An image model
//! ([`model`]) predicts those indices by classification, along with a global
//! rotation and a weak-perspective camera, and the frozen decoder turns the
//! indices back into a mesh.

pub mod error;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod params;
pub mod synth;
pub mod trainer;
pub mod vqvae;

pub use error::{Error, Result};
