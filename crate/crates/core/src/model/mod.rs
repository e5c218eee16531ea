//! Image-to-token predictor.

pub mod config;
pub mod extractor;
pub mod nn;
pub mod rotation;
pub mod vqhps;

pub use config::{LogitHead, ModelConfig};
pub use extractor::{ConvExtractor, FeatureExtractor, ImageFeatureMap};
pub use rotation::{matrix_to_rot6d, rot6d_to_matrix, rot6d_to_matrix_tensor, Rot6dOutput};
pub use vqhps::{argmax_rows, predict_tokens, ModelManifest, ModelOutput, Prediction, VqHps, INITIAL_POSE_LEN};
