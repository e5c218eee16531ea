use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{LogitHead, ModelConfig};
use super::extractor::{ConvExtractor, FeatureExtractor, ImageFeatureMap};
use super::nn::{sinusoidal_encoding, DecoderLayer, EncoderLayer, LayerNorm, Linear};
use super::rotation::{rot6d_to_matrix_tensor, rotation_from_row_major_approx};
use crate::error::{config_err, invalid, Error, Result};
use crate::mesh::obj::write_obj;
use crate::mesh::{apply_orientation, CameraParams, CanonicalMesh, RegisteredMesh, Rotation};
use crate::params::{Init, ParamStore};
use crate::synth::DepthImage;
use crate::vqvae::{MeshVqVae, TokenSequence};

const WEIGHTS_FILE: &str = "weights.safetensors";
const MANIFEST_FILE: &str = "manifest.json";

/// Length of the flattened initial pose (17 joints × 3).
pub const INITIAL_POSE_LEN: usize = 51;

/// Number of conditioning inputs: the 9 rotation entries and `[s, tx, ty]`.
const CONDITION_INPUTS: usize = 12;

#[derive(Clone, Debug)]
enum Head {
    Mlp {
        hidden: Linear,
        out: Linear,
    },
    SelfAttention {
        proj: Linear,
        layer: EncoderLayer,
        norm: LayerNorm,
        out: Linear,
    },
}

/// Tensor outputs of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `(B, 3, 3)`.
    pub rotation: Tensor,
    /// `(B, 3)` as `[s, tx, ty]`.
    pub camera: Tensor,
    /// `(B, N, S)`.
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub tokens: TokenSequence,
    pub rotation: Rotation,
    pub camera: CameraParams,
    pub canonical: CanonicalMesh,
    /// `canonical` rotated by `rotation`.
    pub mesh: RegisteredMesh,
}

impl Prediction {
    /// Writes `<stem>.obj` and `<stem>.json` (tokens, row-major rotation, camera).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let obj = dir.join(format!("{stem}.obj"));
        write_obj(&obj, self.mesh.vertices(), self.mesh.topology().faces())?;
        let meta = dir.join(format!("{stem}.json"));
        let body = json!({
            "tokens": self.tokens,
            "rotation": self.rotation.to_row_major(),
            "camera": self.camera.to_array(),
        });
        std::fs::write(&meta, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&meta, e))?;
        Ok(vec![obj, meta])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub hidden_dim: usize,
    pub tokens: usize,
    pub codebook_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub logit_head: LogitHead,
    pub image_size: usize,
    pub codec_fingerprint: String,
    pub fingerprint: String,
    pub initial_pose: Vec<f64>,
    pub config: ModelConfig,
    /// Free-form training record (schedule, loss weights, best epoch).
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

/// Image → (rotation, camera, mesh-token logits).
///
/// Two convolutional extractors feed separate branches: one pooled into the
/// rotation/camera MLP together with the initial pose, one projected to
/// `D`-dimensional image tokens for a transformer encoder. `N` learned mesh
/// tokens attend to the encoded image in a transformer decoder, and the logit
/// head sees each mesh feature concatenated with an embedding of the
/// predicted rotation and camera.
pub struct VqHps {
    config: ModelConfig,
    store: ParamStore,
    initial_pose: Vec<f64>,
    pose: Tensor,
    codec_fingerprint: String,
    rot_extractor: ConvExtractor,
    mesh_extractor: ConvExtractor,
    regressor: [Linear; 3],
    input_proj: Linear,
    positional: Tensor,
    encoder: Vec<EncoderLayer>,
    mesh_tokens: Tensor,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    condition: Linear,
    head: Head,
    pub training_record: Option<serde_json::Value>,
}

impl VqHps {
    pub fn new(
        config: ModelConfig,
        initial_pose: &[f64],
        codec_fingerprint: impl Into<String>,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        Self::assemble(
            config,
            initial_pose.to_vec(),
            codec_fingerprint.into(),
            ParamStore::new(dtype, device, seed),
        )
    }

    /// A model sized for `codec`, checking that its token count and codebook size agree.
    pub fn for_codec(
        config: ModelConfig,
        initial_pose: &[f64],
        codec: &MeshVqVae,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        let model = Self::new(config, initial_pose, codec.fingerprint()?, dtype, device, seed)?;
        model.check_codec_shape(codec)?;
        Ok(model)
    }

    fn assemble(config: ModelConfig, initial_pose: Vec<f64>, codec_fingerprint: String, store: ParamStore) -> Result<Self> {
        config.validate()?;
        if initial_pose.len() != INITIAL_POSE_LEN || initial_pose.iter().any(|v| !v.is_finite()) {
            return Err(invalid!(
                "initial pose needs {INITIAL_POSE_LEN} finite values, got {}",
                initial_pose.len()
            ));
        }
        let (dtype, device) = (store.dtype(), store.device().clone());
        let p = store.root();
        let c = config.feature_channels();
        let d = config.hidden_dim;
        let w = config.regressor_width;
        let rot_extractor = ConvExtractor::new(
            config.image_size,
            config.image_channels,
            &config.extractor_channels,
            p.pp("rot_extractor"),
        )?;
        let mesh_extractor = ConvExtractor::new(
            config.image_size,
            config.image_channels,
            &config.extractor_channels,
            p.pp("mesh_extractor"),
        )?;
        let r = p.pp("regressor");
        let regressor = [
            Linear::new(config.rotation_feature_dim() + INITIAL_POSE_LEN, w, r.pp("0"))?,
            Linear::new(w, w, r.pp("1"))?,
            Linear::zeros(w, 9, r.pp("2"))?,
        ];
        let hw = config.grid_size() * config.grid_size();
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(d, config.heads, config.feedforward_dim, p.pp(format!("encoder.{i}"))))
            .collect::<Result<_>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(d, config.heads, config.feedforward_dim, p.pp(format!("decoder.{i}"))))
            .collect::<Result<_>>()?;
        let cond = config.condition_dim;
        let h = p.pp("head");
        let head = match config.logit_head {
            LogitHead::Mlp => Head::Mlp {
                hidden: Linear::new(d + cond, d, h.pp("hidden"))?,
                out: Linear::new(d, config.codebook_size, h.pp("out"))?,
            },
            LogitHead::SelfAttention => Head::SelfAttention {
                proj: Linear::new(d + cond, d, h.pp("proj"))?,
                layer: EncoderLayer::new(d, config.heads, config.feedforward_dim, h.pp("layer"))?,
                norm: LayerNorm::new(d, h.pp("norm"))?,
                out: Linear::new(d, config.codebook_size, h.pp("out"))?,
            },
        };
        let pose = Tensor::from_vec(initial_pose.clone(), (1, INITIAL_POSE_LEN), &device)?.to_dtype(dtype)?;
        Ok(VqHps {
            rot_extractor,
            mesh_extractor,
            regressor,
            input_proj: Linear::new(c, d, p.pp("input_proj"))?,
            positional: sinusoidal_encoding(hw, d, dtype, &device)?,
            encoder,
            mesh_tokens: p.get((config.tokens, d), "mesh_tokens", Init::Normal(1.0))?,
            decoder,
            decoder_norm: LayerNorm::new(d, p.pp("decoder_norm"))?,
            condition: Linear::new(CONDITION_INPUTS, cond, p.pp("condition"))?,
            head,
            pose,
            initial_pose,
            codec_fingerprint,
            config,
            store,
            training_record: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn initial_pose(&self) -> &[f64] {
        &self.initial_pose
    }

    pub fn codec_fingerprint(&self) -> &str {
        &self.codec_fingerprint
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Names of the parameters driven by the rotation/camera losses.
    pub fn is_rotation_param(name: &str) -> bool {
        name.starts_with("rot_extractor.") || name.starts_with("regressor.")
    }

    /// N and S agree with the codec.
    pub fn check_codec_shape(&self, codec: &MeshVqVae) -> Result<()> {
        if codec.latent_cells() != self.config.tokens || codec.config().codebook_size != self.config.codebook_size {
            return Err(config_err!(
                "model predicts {} tokens over {} entries but the codec has N = {}, S = {}",
                self.config.tokens,
                self.config.codebook_size,
                codec.latent_cells(),
                codec.config().codebook_size
            ));
        }
        Ok(())
    }

    /// Shape check plus an exact fingerprint match.
    pub fn check_codec(&self, codec: &MeshVqVae) -> Result<()> {
        self.check_codec_shape(codec)?;
        let fp = codec.fingerprint()?;
        if fp != self.codec_fingerprint {
            return Err(config_err!(
                "model was trained against codec {} but {} was supplied",
                short(&self.codec_fingerprint),
                short(&fp)
            ));
        }
        Ok(())
    }

    /// `(B, 1, size, size)` batch from depth images.
    pub fn images_tensor(&self, images: &[&DepthImage]) -> Result<Tensor> {
        if self.config.image_channels != 1 {
            return Err(config_err!("depth images need a single-channel model"));
        }
        let size = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * size * size);
        for img in images {
            if img.size != size {
                return Err(invalid!("image is {0}×{0}, the model expects {size}×{size}", img.size));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, size, size), self.device())?.to_dtype(self.dtype())?)
    }

    pub fn extract_rotation_features(&self, images: &Tensor) -> Result<ImageFeatureMap> {
        self.rot_extractor.extract(images)
    }

    pub fn extract_mesh_features(&self, images: &Tensor) -> Result<ImageFeatureMap> {
        self.mesh_extractor.extract(images)
    }

    /// The pooled vector or the flattened grid, per `rotation_from_grid`.
    pub fn rotation_features(&self, features: &ImageFeatureMap) -> Result<Tensor> {
        if self.config.rotation_from_grid {
            Ok(features.grid.flatten_from(1)?)
        } else {
            Ok(features.vector.clone())
        }
    }

    /// `(B, F)` rotation features → rotation `(B, 3, 3)` and camera `(B, 3)`.
    ///
    /// The MLP sees `[feature, initial pose]`. Its 6D output is offset by the
    /// identity's first two columns, and `s = s₀·exp(raw)`.
    pub fn predict_rotation_camera(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, f) = features.dims2()?;
        if f != self.config.rotation_feature_dim() {
            return Err(Error::shape("rotation features", self.config.rotation_feature_dim(), f));
        }
        let x = Tensor::cat(&[features.clone(), self.pose.broadcast_as((b, INITIAL_POSE_LEN))?.contiguous()?], 1)?;
        let x = self.regressor[0].forward(&x)?.relu()?;
        let x = self.regressor[1].forward(&x)?.relu()?;
        let raw = self.regressor[2].forward(&x)?;
        let offset = Tensor::new(&[1f64, 0.0, 0.0, 0.0, 1.0, 0.0], self.device())?.to_dtype(self.dtype())?;
        let rot = rot6d_to_matrix_tensor(&raw.narrow(1, 0, 6)?.broadcast_add(&offset)?)?;
        let s = (raw.narrow(1, 6, 1)? + self.config.camera_scale_prior.ln())?.exp()?;
        let camera = Tensor::cat(&[s, raw.narrow(1, 7, 2)?], 1)?;
        Ok((rot, camera))
    }

    /// `(B, C, H, W)` grid → `(B, HW, D)` encoded image tokens.
    pub fn encode_image_tokens(&self, grid: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = grid.dims4()?;
        let g = self.config.grid_size();
        if c != self.config.feature_channels() || h != g || w != g {
            return Err(Error::shape(
                "feature grid",
                format!("{} × {g} × {g}", self.config.feature_channels()),
                format!("{c} × {h} × {w}"),
            ));
        }
        let tokens = grid.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let mut x = self.input_proj.forward(&tokens)?.broadcast_add(&self.positional)?;
        for layer in &self.encoder {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Mesh tokens attend to `features (B, HW, D)`; the head adds the
    /// rotation `(B, 3, 3)` and camera `(B, 3)` conditioning. Returns `(B, N, S)`.
    pub fn decode_mesh_logits(&self, features: &Tensor, rotation: &Tensor, camera: &Tensor) -> Result<Tensor> {
        let (b, _, d) = features.dims3()?;
        if d != self.config.hidden_dim {
            return Err(Error::shape("image tokens", self.config.hidden_dim, d));
        }
        let n = self.config.tokens;
        let mut q = self.mesh_tokens.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        for layer in &self.decoder {
            q = layer.forward(&q, features)?;
        }
        let z = self.decoder_norm.forward(&q)?;
        let cond = Tensor::cat(&[rotation.reshape((b, 9))?, camera.clone()], 1)?;
        let cond = self.condition.forward(&cond)?.relu()?;
        let cond = cond.unsqueeze(1)?.broadcast_as((b, n, self.config.condition_dim))?.contiguous()?;
        let h = Tensor::cat(&[z, cond], 2)?;
        match &self.head {
            Head::Mlp { hidden, out } => out.forward(&hidden.forward(&h)?.relu()?),
            Head::SelfAttention { proj, layer, norm, out } => {
                let x = layer.forward(&proj.forward(&h)?)?;
                out.forward(&norm.forward(&x)?)
            }
        }
    }

    /// Full tensor forward. The logit head receives the rotation and camera
    /// detached, so token losses never reach the rotation branch.
    pub fn forward_tensors(&self, images: &Tensor) -> Result<ModelOutput> {
        let rf = self.extract_rotation_features(images)?;
        let (rotation, camera) = self.predict_rotation_camera(&self.rotation_features(&rf)?)?;
        let mf = self.extract_mesh_features(images)?;
        let features = self.encode_image_tokens(&mf.grid)?;
        let logits = self.decode_mesh_logits(&features, &rotation.detach(), &camera.detach())?;
        Ok(ModelOutput {
            rotation,
            camera,
            logits,
        })
    }

    /// Tokens, rotation and camera for each image, without decoding.
    pub fn predict_raw(&self, images: &[&DepthImage]) -> Result<Vec<(TokenSequence, Rotation, CameraParams)>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let o = self.forward_tensors(&self.images_tensor(chunk)?)?;
            let tokens = predict_tokens(&o.logits)?;
            let rots = o.rotation.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let cams = o.camera.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for (i, t) in tokens.into_iter().enumerate() {
                let rotation = rotation_from_row_major_approx(&rots[i * 9..i * 9 + 9])?;
                let camera = CameraParams::new(cams[i * 3], [cams[i * 3 + 1], cams[i * 3 + 2]])?;
                out.push((t, rotation, camera));
            }
        }
        Ok(out)
    }

    /// Image → rotation and camera → tokens → canonical mesh → oriented mesh.
    pub fn predict(&self, codec: &MeshVqVae, images: &[&DepthImage]) -> Result<Vec<Prediction>> {
        self.check_codec_shape(codec)?;
        let raw = self.predict_raw(images)?;
        let mut out = Vec::with_capacity(raw.len());
        for chunk in raw.chunks(128) {
            let grids = chunk.iter().map(|(t, _, _)| codec.dequantize(t)).collect::<Result<Vec<_>>>()?;
            let meshes = codec.decode_batch(&grids.iter().collect::<Vec<_>>())?;
            for ((tokens, rotation, camera), canonical) in chunk.iter().zip(meshes) {
                let mesh = apply_orientation(&canonical, rotation)?;
                out.push(Prediction {
                    tokens: tokens.clone(),
                    rotation: *rotation,
                    camera: *camera,
                    canonical,
                    mesh,
                });
            }
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Result<ModelManifest> {
        Ok(ModelManifest {
            hidden_dim: self.config.hidden_dim,
            tokens: self.config.tokens,
            codebook_size: self.config.codebook_size,
            encoder_layers: self.config.encoder_layers,
            decoder_layers: self.config.decoder_layers,
            heads: self.config.heads,
            logit_head: self.config.logit_head,
            image_size: self.config.image_size,
            codec_fingerprint: self.codec_fingerprint.clone(),
            fingerprint: self.store.checksum()?,
            initial_pose: self.initial_pose.clone(),
            config: self.config.clone(),
            training: self.training_record.clone(),
        })
    }

    /// Writes `weights.safetensors` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<ModelManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        let manifest = self.manifest()?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<ModelManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device, trainable: bool) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let path = dir.join(WEIGHTS_FILE);
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing model weights")));
        }
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(&path, device)
            .map_err(|e| Error::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let store = ParamStore::from_tensors(tensors, dtype, device, trainable);
        let mut model = Self::assemble(manifest.config.clone(), manifest.initial_pose.clone(), manifest.codec_fingerprint.clone(), store)?;
        model.training_record = manifest.training.clone();
        if dtype == DType::F32 && model.store.checksum()? != manifest.fingerprint {
            return Err(config_err!("model weights do not match the manifest fingerprint"));
        }
        Ok(model)
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// Row-wise argmax over a flat `rows × s` buffer; ties go to the lowest index.
pub fn argmax_rows(values: &[f32], s: usize) -> Result<Vec<u32>> {
    if s == 0 || values.len() % s != 0 {
        return Err(invalid!("logit buffer of length {} is not a multiple of {s}", values.len()));
    }
    values
        .chunks(s)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(invalid!("logits contain non-finite values"));
                }
                if v > row[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        })
        .collect()
}

/// `(B, N, S)` logits → one token sequence per batch item.
pub fn predict_tokens(logits: &Tensor) -> Result<Vec<TokenSequence>> {
    let (b, n, s) = logits.dims3()?;
    let flat = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let idx = argmax_rows(&flat, s)?;
    Ok((0..b).map(|i| TokenSequence(idx[i * n..(i + 1) * n].to_vec())).collect())
}
