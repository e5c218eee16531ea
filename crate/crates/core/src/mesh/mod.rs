//! Mesh geometry: topology, canonicalization, joint regression and metrics.

pub mod camera;
pub mod geometry;
pub mod joints;
pub mod metrics;
pub mod obj;
pub mod topology;

pub use camera::CameraParams;
pub use geometry::{
    apply_orientation, canonicalize, canonicalize_about, centroid, CanonicalMesh, CanonicalOrigin, RegisteredMesh,
    Rotation, Vec3,
};
pub use joints::{JointRegressor, JointSet};
pub use metrics::{mpjpe, pa_mpjpe, procrustes_align, pve, Similarity};
pub use topology::{MeshTopology, PartLabels};
