//! Loading user-supplied registered meshes.
//!
//! The input directory holds `<name>.obj` meshes on the configured topology,
//! each with a `<name>.json` annotation:
//!
//! ```json
//! {"rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1], "camera": [0.9, 0.0, 0.0], "joints_2d": [[0.1, 0.2], ...]}
//! ```
//!
//! Meshes are taken as already cropped and normalized: vertices are in the
//! camera frame (meters) and 2D joints are in normalized image units. An
//! optional `<name>.npy` image is used when present; otherwise the mesh is
//! rasterized.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::dataset::{assign_splits, read_image, Annotation, Dataset, SampleRecord};
use super::raster::rasterize;
use crate::error::{Error, Result};
use crate::mesh::obj::read_obj;
use crate::mesh::{canonicalize, CameraParams, JointRegressor, MeshTopology, RegisteredMesh, Rotation};

pub struct IngestReport {
    pub dataset: Dataset,
    pub rejected: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

pub fn ingest_smpl_meshes(
    dir: &Path,
    topology: Arc<MeshTopology>,
    regressor: JointRegressor,
    image_size: usize,
) -> Result<IngestReport> {
    let mut objs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    objs.sort();
    let mut warnings = Vec::new();
    if objs.is_empty() {
        warnings.push(format!("no OBJ meshes found in {}", dir.display()));
        log::warn!("no OBJ meshes found in {}", dir.display());
    }
    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for obj in objs {
        match ingest_one(&obj, &topology, &regressor, image_size) {
            Ok(parts) => accepted.push(parts),
            Err(e) => rejected.push((obj, e.to_string())),
        }
    }
    let splits = assign_splits(accepted.len(), 0);
    let records = accepted
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(id, (mut r, s))| {
            r.id = id;
            r.split = s;
            r
        })
        .collect();
    let dataset = Dataset::from_records(records, topology, regressor, 0, image_size, "ingested".into())?;
    Ok(IngestReport {
        dataset,
        rejected,
        warnings,
    })
}

fn ingest_one(obj: &Path, topology: &Arc<MeshTopology>, regressor: &JointRegressor, image_size: usize) -> Result<SampleRecord> {
    let (verts, _) = read_obj(obj)?;
    if verts.len() != topology.vertex_count() {
        return Err(Error::InvalidInput(format!(
            "vertex count {} does not match the topology's {}",
            verts.len(),
            topology.vertex_count()
        )));
    }
    let json = obj.with_extension("json");
    if !json.exists() {
        return Err(Error::InvalidInput(format!("missing annotation {}", json.display())));
    }
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let ann: Annotation = serde_json::from_str(&text)?;
    let rotation = Rotation::from_row_major(&ann.rotation)?;
    let camera = CameraParams::new(ann.camera[0], [ann.camera[1], ann.camera[2]])?;
    let mesh = RegisteredMesh::new(topology.clone(), verts)?;
    let centered = mesh.translated(&-mesh.centroid())?;
    let gt_joints_3d = regressor.regress(&centered)?;
    if ann.joints_2d.len() != gt_joints_3d.len() {
        return Err(Error::InvalidInput(format!(
            "annotation has {} 2D joints, regressor produces {}",
            ann.joints_2d.len(),
            gt_joints_3d.len()
        )));
    }
    let npy = obj.with_extension("npy");
    let image = if npy.exists() {
        read_image(&npy)?
    } else {
        rasterize(&centered, &camera, image_size)?.image
    };
    Ok(SampleRecord {
        id: 0,
        split: super::dataset::Split::Train,
        image,
        gt_canonical: canonicalize(&mesh, &rotation)?,
        gt_tokens: None,
        gt_rotation: rotation,
        camera,
        gt_joints_3d,
        gt_joints_2d: ann.joints_2d,
    })
}
