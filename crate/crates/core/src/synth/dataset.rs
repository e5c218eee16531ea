use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::raster::{rasterize, DepthImage};
use super::template::ArticulatedTemplate;
use crate::error::{invalid, Error, Result};
use crate::mesh::obj::{read_obj, write_obj};
use crate::mesh::{
    apply_orientation, CameraParams, CanonicalMesh, JointRegressor, JointSet, MeshTopology, RegisteredMesh, Rotation,
    Vec3,
};
use crate::vqvae::{MeshVqVae, TokenSequence};

pub const DEFAULT_IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub id: usize,
    pub split: Split,
    pub image: DepthImage,
    pub gt_canonical: CanonicalMesh,
    pub gt_tokens: Option<TokenSequence>,
    pub gt_rotation: Rotation,
    pub camera: CameraParams,
    /// Joints of the oriented, centered mesh.
    pub gt_joints_3d: JointSet,
    /// `camera.project(gt_joints_3d)`, normalized image units.
    pub gt_joints_2d: Vec<[f64; 2]>,
}

impl SampleRecord {
    /// `apply_orientation(gt_canonical, gt_rotation)`.
    pub fn oriented_mesh(&self) -> Result<RegisteredMesh> {
        apply_orientation(&self.gt_canonical, &self.gt_rotation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub template_hash: String,
    pub topology_hash: String,
    pub joint_layout: String,
    pub codec_fingerprint: Option<String>,
    pub fingerprint: String,
    pub split_sizes: [usize; 3],
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub topology: Arc<MeshTopology>,
    pub regressor: JointRegressor,
    pub records: Vec<SampleRecord>,
}

/// Deterministic 64-bit value from a seed, an index and a tag.
pub fn derive_seed(seed: u64, index: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Split assignment: records are ranked by a seeded hash of their index;
/// the first 80% train, the next 10% validation, the rest test.
pub fn assign_splits(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<(u64, usize)> = (0..count).map(|i| (derive_seed(seed, i as u64, "split"), i)).collect();
    order.sort();
    let n_val = (count as f64 * 0.1).round() as usize;
    let n_test = (count as f64 * 0.1).round() as usize;
    let n_train = count - n_val - n_test;
    let mut out = vec![Split::Train; count];
    for (rank, &(_, i)) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Random global orientation: yaw in ±120°, pitch and roll in ±0.3 rad.
pub fn sample_rotation(rng: &mut impl Rng) -> Rotation {
    let yaw = rng.random_range(-2.1..=2.1);
    let pitch = rng.random_range(-0.3..=0.3);
    let roll = rng.random_range(-0.3..=0.3);
    Rotation::from_axis_angle(&Vec3::y(), yaw)
        .compose(&Rotation::from_axis_angle(&Vec3::x(), pitch))
        .compose(&Rotation::from_axis_angle(&Vec3::z(), roll))
}

pub fn sample_camera(rng: &mut impl Rng) -> CameraParams {
    CameraParams {
        s: rng.random_range(0.75..=0.95),
        t: [rng.random_range(-0.08..=0.08), rng.random_range(-0.08..=0.08)],
    }
}

/// Builds one record from an oriented canonical mesh.
pub fn make_record(
    id: usize,
    split: Split,
    canonical: CanonicalMesh,
    rotation: Rotation,
    camera: CameraParams,
    regressor: &JointRegressor,
    image_size: usize,
) -> Result<SampleRecord> {
    let oriented = apply_orientation(&canonical, &rotation)?;
    let gt_joints_3d = regressor.regress(&oriented)?;
    let gt_joints_2d = camera.project(&gt_joints_3d);
    let image = rasterize(&oriented, &camera, image_size)?.image;
    Ok(SampleRecord {
        id,
        split,
        image,
        gt_canonical: canonical,
        gt_tokens: None,
        gt_rotation: rotation,
        camera,
        gt_joints_3d,
        gt_joints_2d,
    })
}

pub fn build_dataset(template: &ArticulatedTemplate, count: usize, seed: u64, codec: Option<&MeshVqVae>) -> Result<Dataset> {
    build_dataset_sized(template, count, seed, DEFAULT_IMAGE_SIZE, codec)
}

pub fn build_dataset_sized(
    template: &ArticulatedTemplate,
    count: usize,
    seed: u64,
    image_size: usize,
    codec: Option<&MeshVqVae>,
) -> Result<Dataset> {
    if count == 0 {
        return Err(invalid!("dataset count must be at least 1"));
    }
    let regressor = template.desk_regressor()?;
    let splits = assign_splits(count, seed);
    let mut records = Vec::with_capacity(count);
    for (id, &split) in splits.iter().enumerate() {
        let i = id as u64;
        let body = template.sample_body(derive_seed(seed, i, "pose"), derive_seed(seed, i, "shape"))?;
        let canonical = CanonicalMesh::recentered(&body)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i, "view"));
        let rotation = sample_rotation(&mut rng);
        let camera = sample_camera(&mut rng);
        records.push(make_record(id, split, canonical, rotation, camera, &regressor, image_size)?);
    }
    let mut ds = Dataset::from_records(records, template.topology().clone(), regressor, seed, image_size, template.hash())?;
    if let Some(codec) = codec {
        ds.populate_tokens(codec)?;
    }
    Ok(ds)
}

fn hash_record(h: &mut Sha256, r: &SampleRecord) {
    h.update((r.id as u64).to_le_bytes());
    h.update(r.split.name().as_bytes());
    for v in r.gt_canonical.vertices() {
        for c in v.iter() {
            h.update(c.to_le_bytes());
        }
    }
    for v in r.gt_rotation.to_row_major() {
        h.update(v.to_le_bytes());
    }
    for v in r.camera.to_array() {
        h.update(v.to_le_bytes());
    }
    for v in &r.image.data {
        h.update(v.to_le_bytes());
    }
}

impl Dataset {
    pub fn from_records(
        records: Vec<SampleRecord>,
        topology: Arc<MeshTopology>,
        regressor: JointRegressor,
        seed: u64,
        image_size: usize,
        template_hash: String,
    ) -> Result<Self> {
        let mut ds = Dataset {
            manifest: DatasetManifest {
                seed,
                count: records.len(),
                image_size,
                template_hash,
                topology_hash: topology.hash(),
                joint_layout: regressor.layout().to_string(),
                codec_fingerprint: None,
                fingerprint: String::new(),
                split_sizes: [0; 3],
            },
            topology,
            regressor,
            records,
        };
        ds.manifest.split_sizes = Split::ALL.map(|s| ds.records.iter().filter(|r| r.split == s).count());
        ds.manifest.fingerprint = ds.compute_fingerprint();
        Ok(ds)
    }

    pub fn compute_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.seed.to_le_bytes());
        h.update((self.records.len() as u64).to_le_bytes());
        h.update(self.manifest.template_hash.as_bytes());
        h.update(self.manifest.topology_hash.as_bytes());
        for r in &self.records {
            hash_record(&mut h, r);
        }
        hex::encode(h.finalize())
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Fills `gt_tokens` by tokenizing every canonical mesh with `codec`.
    pub fn populate_tokens(&mut self, codec: &MeshVqVae) -> Result<()> {
        for chunk in self.records.chunks_mut(256) {
            let meshes: Vec<&CanonicalMesh> = chunk.iter().map(|r| &r.gt_canonical).collect();
            let tokens = codec.tokenize_batch(&meshes)?;
            for (r, t) in chunk.iter_mut().zip(tokens) {
                r.gt_tokens = Some(t);
            }
        }
        self.manifest.codec_fingerprint = Some(codec.fingerprint()?);
        Ok(())
    }

    /// Writes one directory per split (`<id>.obj`, `<id>.json`, `<id>.npy`)
    /// plus `manifest.json`, `topology.json` and `regressor.json`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for s in Split::ALL {
            let d = dir.join(s.name());
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for r in &self.records {
            let base = dir.join(r.split.name()).join(format!("{:06}", r.id));
            let obj = base.with_extension("obj");
            write_obj(&obj, r.gt_canonical.vertices(), self.topology.faces())?;
            let ann = Annotation::from_record(r);
            let json = base.with_extension("json");
            std::fs::write(&json, serde_json::to_string(&ann)?).map_err(|e| Error::io(&json, e))?;
            let npy = base.with_extension("npy");
            Tensor::from_vec(r.image.data.clone(), (r.image.size, r.image.size), &Device::Cpu)?
                .write_npy(&npy)
                .map_err(|e| Error::Runtime(format!("cannot write {}: {e}", npy.display())))?;
            written.extend([obj, json, npy]);
        }
        let topo = dir.join("topology.json");
        self.topology.save_json(&topo)?;
        let reg = dir.join("regressor.json");
        self.regressor.save_json(&reg)?;
        let man = dir.join("manifest.json");
        std::fs::write(&man, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&man, e))?;
        written.extend([topo, reg, man]);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man = dir.join("manifest.json");
        let text = std::fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let topology = Arc::new(MeshTopology::load_json(&dir.join("topology.json"))?);
        let regressor = JointRegressor::load(&dir.join("regressor.json"))?;
        let mut records = Vec::with_capacity(manifest.count);
        for s in Split::ALL {
            let d = dir.join(s.name());
            let mut stems: Vec<PathBuf> = std::fs::read_dir(&d)
                .map_err(|e| Error::io(&d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            stems.sort();
            for json in stems {
                let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
                let ann: Annotation = serde_json::from_str(&text)?;
                let (verts, _) = read_obj(&json.with_extension("obj"))?;
                let mesh = RegisteredMesh::new(topology.clone(), verts)?;
                let image = read_image(&json.with_extension("npy"))?;
                records.push(ann.into_record(s, CanonicalMesh::from_centered(mesh)?, image)?);
            }
        }
        records.sort_by_key(|r| r.id);
        let ds = Dataset {
            manifest,
            topology,
            regressor,
            records,
        };
        if ds.records.len() != ds.manifest.count || ds.compute_fingerprint() != ds.manifest.fingerprint {
            return Err(invalid!("dataset at {} does not match its manifest fingerprint", dir.display()));
        }
        Ok(ds)
    }
}

pub(crate) fn read_image(path: &Path) -> Result<DepthImage> {
    let t = Tensor::read_npy(path).map_err(|e| Error::Runtime(format!("cannot read image {}: {e}", path.display())))?;
    let (h, w) = t.dims2()?;
    if h != w {
        return Err(invalid!("image {} is {h}×{w}, expected square", path.display()));
    }
    Ok(DepthImage {
        size: h,
        data: t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?,
    })
}

/// Per-record JSON annotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(default)]
    pub id: usize,
    /// Row-major root rotation.
    pub rotation: [f64; 9],
    /// `[s, tx, ty]`.
    pub camera: [f64; 3],
    pub joints_2d: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints_3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenSequence>,
}

impl Annotation {
    fn from_record(r: &SampleRecord) -> Self {
        Annotation {
            id: r.id,
            rotation: r.gt_rotation.to_row_major(),
            camera: r.camera.to_array(),
            joints_2d: r.gt_joints_2d.clone(),
            joints_3d: Some(r.gt_joints_3d.joints().iter().map(|j| [j.x, j.y, j.z]).collect()),
            tokens: r.gt_tokens.clone(),
        }
    }

    fn into_record(self, split: Split, canonical: CanonicalMesh, image: DepthImage) -> Result<SampleRecord> {
        let joints = self
            .joints_3d
            .ok_or_else(|| invalid!("annotation {} has no 3D joints", self.id))?;
        Ok(SampleRecord {
            id: self.id,
            split,
            image,
            gt_canonical: canonical,
            gt_tokens: self.tokens,
            gt_rotation: Rotation::from_row_major(&self.rotation)?,
            camera: CameraParams::new(self.camera[0], [self.camera[1], self.camera[2]])?,
            gt_joints_3d: JointSet::new(joints.iter().map(|j| Vec3::new(j[0], j[1], j[2])).collect()),
            gt_joints_2d: self.joints_2d,
        })
    }
}
