//! Procedural desk-scale training data: an articulated body template, pose
//! and shape sampling, depth images and joint annotations, plus a loader for
//! user-supplied registered meshes.

pub mod dataset;
pub mod ingest;
pub mod raster;
pub mod template;

pub use dataset::{build_dataset, build_dataset_sized, Dataset, DatasetManifest, SampleRecord, Split};
pub use ingest::{ingest_smpl_meshes, IngestReport};
pub use raster::{rasterize, DepthImage};
pub use template::{ArticulatedTemplate, Pose, Shape};
