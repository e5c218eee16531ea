//! Vector-quantized mesh autoencoder.
//!
//! The encoder maps a canonical mesh to an `N × L` latent grid through
//! neighborhood convolutions and pooling along a [`MeshTopology`] hierarchy;
//! each latent row is replaced by its nearest codebook entry, and the
//! decoder mirrors the encoder back to vertex positions.
//!
//! [`MeshTopology`]: crate::mesh::MeshTopology

pub mod codec;
pub mod conv;
pub mod edit;
pub mod quantizer;
pub mod sparse;
pub mod tokens;

pub use codec::{CodecConfig, CodecManifest, MeshVqVae, VqForward};
pub use conv::MeshConv;
pub use quantizer::{straight_through, Codebook, LatentGrid, QuantizedGrid, Quantization, TokenSequence};
pub use edit::{identify_part_indices, interpolate_latent, swap_body_part, PartAttribution, TokenDecoder};
pub use sparse::SparseRows;
pub use tokens::TokenFile;
