use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conv::MeshConv;
use super::quantizer::{straight_through, Codebook, LatentGrid, QuantizedGrid, Quantization, TokenSequence};
use super::sparse::SparseRows;
use crate::error::{config_err, invalid, Error, Result};
use crate::mesh::{CanonicalMesh, MeshTopology, RegisteredMesh};
use crate::params::{hash_tensor, ParamStore};

const WEIGHTS_FILE: &str = "weights.safetensors";
const MANIFEST_FILE: &str = "manifest.json";
const TOPOLOGY_FILE: &str = "topology.json";
const CODEBOOK_KEY: &str = "codebook.entries";
const USAGE_KEY: &str = "codebook.usage";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// `L`, dimension of each latent cell.
    pub latent_dim: usize,
    /// `S`, number of codebook entries.
    pub codebook_size: usize,
    /// Encoder width at each pooled level, finest first. One entry per pool
    /// map of the topology; the decoder mirrors these widths.
    pub channels: Vec<usize>,
    /// `K`, shared weight bases per convolution.
    pub basis_count: usize,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    /// Subtract the vertex mean from decoder output so decodes are centered.
    pub center_output: bool,
}

impl CodecConfig {
    /// 1024-vertex template, three pooling levels, `N = 16`.
    pub fn desk() -> Self {
        CodecConfig {
            latent_dim: 9,
            codebook_size: 512,
            channels: vec![16, 32, 64],
            basis_count: 4,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            center_output: true,
        }
    }

    /// 6890-vertex topology with four pooling levels down to `N = 54`.
    pub fn full() -> Self {
        CodecConfig {
            channels: vec![32, 64, 128, 128],
            ..Self::desk()
        }
    }

    /// Tiny float64 configuration for gradient checks.
    pub fn micro(levels: usize) -> Self {
        CodecConfig {
            latent_dim: 2,
            codebook_size: 4,
            channels: vec![2; levels],
            basis_count: 2,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            center_output: false,
        }
    }

    pub fn validate(&self, topology: &MeshTopology) -> Result<()> {
        if self.latent_dim == 0 || self.basis_count == 0 {
            return Err(config_err!("latent_dim and basis_count must be positive"));
        }
        if self.codebook_size < 2 {
            return Err(config_err!("codebook_size must be at least 2"));
        }
        if self.channels.len() != topology.pool_maps().len() {
            return Err(config_err!(
                "codec has {} channel entries but the topology has {} pooling levels",
                self.channels.len(),
                topology.pool_maps().len()
            ));
        }
        if self.channels.is_empty() {
            return Err(config_err!("codec topology needs at least one pooling level"));
        }
        if self.channels.contains(&0) {
            return Err(config_err!("channel widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("ema_decay must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Sidecar JSON written next to codec weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecManifest {
    pub n: usize,
    pub l: usize,
    pub s: usize,
    pub vertex_count: usize,
    pub topology_hash: String,
    pub data_fingerprint: Option<String>,
    pub reconstruction_pve_mm: Option<f64>,
    pub fingerprint: String,
    pub config: CodecConfig,
}

/// Outputs of one training forward pass.
pub struct VqForward {
    pub latent: Tensor,
    pub quantized: Tensor,
    pub reconstruction: Tensor,
    pub tokens: Vec<u32>,
}

pub struct MeshVqVae {
    config: CodecConfig,
    topology: Arc<MeshTopology>,
    store: ParamStore,
    encoder: Vec<MeshConv>,
    to_latent: MeshConv,
    decoder: Vec<MeshConv>,
    to_vertices: MeshConv,
    pools: Vec<(SparseRows, Tensor)>,
    unpools: Vec<(SparseRows, Tensor)>,
    codebook: Codebook,
    pub data_fingerprint: Option<String>,
    pub reconstruction_pve_mm: Option<f64>,
}

fn level_rows(topology: &MeshTopology, level: usize) -> Result<SparseRows> {
    let lv = &topology.levels()[level];
    SparseRows::from_lists(&lv.neighbors, lv.vertex_count())
}

impl MeshVqVae {
    /// Fresh codec with seeded random parameters and a placeholder codebook.
    pub fn new(config: CodecConfig, topology: Arc<MeshTopology>, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, device, seed);
        let entries = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
            (0..config.codebook_size * config.latent_dim)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect()
        };
        let codebook = Codebook::new(config.codebook_size, config.latent_dim, entries)?;
        Self::assemble(config, topology, store, codebook)
    }

    fn assemble(config: CodecConfig, topology: Arc<MeshTopology>, store: ParamStore, codebook: Codebook) -> Result<Self> {
        config.validate(&topology)?;
        if codebook.size() != config.codebook_size || codebook.dim() != config.latent_dim {
            return Err(config_err!("codebook shape does not match codec config"));
        }
        let (dtype, device) = (store.dtype(), store.device().clone());
        let depth = config.channels.len();
        let k = config.basis_count;
        let root = store.root();

        let mut pools = Vec::new();
        let mut unpools = Vec::new();
        for pm in topology.pool_maps() {
            let rows = SparseRows::from_lists(&pm.members, pm.fine_count)?;
            let coeffs = rows.constant_coeffs(&pm.weights, dtype, &device)?;
            pools.push((rows, coeffs));
            let owner: Vec<Vec<u32>> = pm.owner().into_iter().map(|c| vec![c]).collect();
            let rows = SparseRows::from_lists(&owner, pm.coarse_count())?;
            let coeffs = rows.constant_coeffs(&vec![vec![1.0]; pm.fine_count], dtype, &device)?;
            unpools.push((rows, coeffs));
        }

        let mut encoder = Vec::new();
        let mut c_in = 3;
        for (l, &c) in config.channels.iter().enumerate() {
            encoder.push(MeshConv::new(level_rows(&topology, l)?, c_in, c, k, root.pp(format!("enc.{l}")))?);
            c_in = c;
        }
        let to_latent = MeshConv::new(level_rows(&topology, depth)?, c_in, config.latent_dim, k, root.pp("enc.latent"))?;

        let mut decoder = Vec::new();
        let mut c_in = config.latent_dim;
        let top = config.channels[depth - 1];
        decoder.push(MeshConv::new(level_rows(&topology, depth)?, c_in, top, k, root.pp(format!("dec.{depth}")))?);
        c_in = top;
        for l in (0..depth).rev() {
            let c = config.channels[l];
            decoder.push(MeshConv::new(level_rows(&topology, l)?, c_in, c, k, root.pp(format!("dec.{l}")))?);
            c_in = c;
        }
        let to_vertices = MeshConv::new(level_rows(&topology, 0)?, c_in, 3, k, root.pp("dec.out"))?;

        Ok(MeshVqVae {
            config,
            topology,
            store,
            encoder,
            to_latent,
            decoder,
            to_vertices,
            pools,
            unpools,
            codebook,
            data_fingerprint: None,
            reconstruction_pve_mm: None,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        &self.topology
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook {
        &mut self.codebook
    }

    pub fn set_codebook(&mut self, codebook: Codebook) -> Result<()> {
        if codebook.size() != self.config.codebook_size || codebook.dim() != self.config.latent_dim {
            return Err(config_err!("codebook shape does not match codec config"));
        }
        self.codebook = codebook;
        Ok(())
    }

    /// `N`, the number of latent cells.
    pub fn latent_cells(&self) -> usize {
        self.topology.coarsest_size()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `(B, V, 3)` → `(B, N, L)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, (rows, coeffs)) in self.encoder.iter().zip(&self.pools) {
            h = conv.forward(&h)?.elu(1.0)?;
            h = rows.gather(&h, coeffs)?.squeeze(2)?;
        }
        self.to_latent.forward(&h)
    }

    /// `(B, N, L)` → `(B, V, 3)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.decoder[0].forward(z)?.elu(1.0)?;
        for (conv, (rows, coeffs)) in self.decoder[1..].iter().zip(self.unpools.iter().rev()) {
            h = rows.gather(&h, coeffs)?.squeeze(2)?;
            h = conv.forward(&h)?.elu(1.0)?;
        }
        let out = self.to_vertices.forward(&h)?;
        if self.config.center_output {
            Ok(out.broadcast_sub(&out.mean_keepdim(1)?)?)
        } else {
            Ok(out)
        }
    }

    /// Nearest-entry lookup for a `(B, N, L)` latent tensor; returns the
    /// quantized tensor (no gradient) and the flat token list.
    pub fn quantize_tensor(&self, z: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let dims = z.dims().to_vec();
        let flat: Vec<f32> = z.detach().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let tokens = self.codebook.nearest_rows(&flat);
        let zd = self.tokens_tensor(&tokens, dims[0])?;
        Ok((zd, tokens))
    }

    /// Codebook rows for `batch × N` flat tokens, as `(batch, N, L)`.
    pub fn tokens_tensor(&self, tokens: &[u32], batch: usize) -> Result<Tensor> {
        let n = tokens.len() / batch.max(1);
        let grid = self.codebook.dequantize(&TokenSequence(tokens.to_vec()))?;
        Ok(Tensor::from_vec(grid.values, (batch, n, self.config.latent_dim), self.device())?.to_dtype(self.dtype())?)
    }

    /// Full training pass: encode, quantize, straight-through, decode.
    pub fn forward_vq(&self, x: &Tensor) -> Result<VqForward> {
        let latent = self.encode_tensor(x)?;
        let (quantized, tokens) = self.quantize_tensor(&latent)?;
        let st = straight_through(&latent, &quantized)?;
        let reconstruction = self.decode_tensor(&st)?;
        Ok(VqForward {
            latent,
            quantized,
            reconstruction,
            tokens,
        })
    }

    pub fn meshes_tensor(&self, meshes: &[&RegisteredMesh]) -> Result<Tensor> {
        let v = self.topology.vertex_count();
        let mut data = Vec::with_capacity(meshes.len() * v * 3);
        for m in meshes {
            if m.vertex_count() != v {
                return Err(invalid!("mesh has {} vertices, codec expects {v}", m.vertex_count()));
            }
            data.extend(m.vertices().iter().flat_map(|p| [p.x, p.y, p.z]));
        }
        Ok(Tensor::from_vec(data, (meshes.len(), v, 3), self.device())?.to_dtype(self.dtype())?)
    }

    pub fn tensor_to_meshes(&self, t: &Tensor) -> Result<Vec<CanonicalMesh>> {
        let (b, v, _) = t.dims3()?;
        let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        (0..b)
            .map(|i| {
                let mesh = RegisteredMesh::from_flat(self.topology.clone(), &flat[i * v * 3..(i + 1) * v * 3])?;
                if self.config.center_output {
                    CanonicalMesh::recentered(&mesh)
                } else {
                    CanonicalMesh::from_centered(mesh).map_err(|_| Error::Runtime("decoder output is not centered".into()))
                }
            })
            .collect()
    }

    pub fn encode_batch(&self, meshes: &[&CanonicalMesh]) -> Result<Vec<LatentGrid>> {
        let raw: Vec<&RegisteredMesh> = meshes.iter().map(|m| m.as_mesh()).collect();
        for m in &raw {
            if !m.has_topology(&self.topology) {
                return Err(invalid!("mesh topology does not match the codec topology"));
            }
        }
        let z = self.encode_tensor(&self.meshes_tensor(&raw)?)?;
        let (b, n, l) = z.dims3()?;
        let flat: Vec<f32> = z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        (0..b)
            .map(|i| LatentGrid::new(n, l, flat[i * n * l..(i + 1) * n * l].to_vec()))
            .collect()
    }

    pub fn encode(&self, mesh: &CanonicalMesh) -> Result<LatentGrid> {
        Ok(self.encode_batch(&[mesh])?.remove(0))
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<Quantization> {
        self.check_grid(z.rows, z.dim)?;
        self.codebook.quantize(z)
    }

    pub fn dequantize(&self, tokens: &TokenSequence) -> Result<QuantizedGrid> {
        self.check_tokens(tokens)?;
        self.codebook.dequantize(tokens)
    }

    pub fn decode_batch(&self, grids: &[&QuantizedGrid]) -> Result<Vec<CanonicalMesh>> {
        let mut data = Vec::new();
        for g in grids {
            self.check_grid(g.rows, g.dim)?;
            data.extend_from_slice(&g.values);
        }
        let z = Tensor::from_vec(data, (grids.len(), self.latent_cells(), self.config.latent_dim), self.device())?
            .to_dtype(self.dtype())?;
        self.tensor_to_meshes(&self.decode_tensor(&z)?)
    }

    pub fn decode(&self, zd: &QuantizedGrid) -> Result<CanonicalMesh> {
        Ok(self.decode_batch(&[zd])?.remove(0))
    }

    pub fn decode_tokens(&self, tokens: &TokenSequence) -> Result<CanonicalMesh> {
        self.decode(&self.dequantize(tokens)?)
    }

    pub fn tokenize_batch(&self, meshes: &[&CanonicalMesh]) -> Result<Vec<TokenSequence>> {
        self.encode_batch(meshes)?
            .iter()
            .map(|z| Ok(self.codebook.quantize(z)?.tokens))
            .collect()
    }

    pub fn tokenize(&self, mesh: &CanonicalMesh) -> Result<TokenSequence> {
        Ok(self.tokenize_batch(&[mesh])?.remove(0))
    }

    /// `decode(quantize(encode(mesh)))`.
    pub fn reconstruct(&self, mesh: &CanonicalMesh) -> Result<CanonicalMesh> {
        self.decode_tokens(&self.tokenize(mesh)?)
    }

    fn check_grid(&self, rows: usize, dim: usize) -> Result<()> {
        if rows != self.latent_cells() || dim != self.config.latent_dim {
            return Err(Error::shape(
                "latent grid",
                format!("{} × {}", self.latent_cells(), self.config.latent_dim),
                format!("{rows} × {dim}"),
            ));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.latent_cells() {
            return Err(Error::shape("token sequence", self.latent_cells(), tokens.len()));
        }
        Ok(())
    }

    /// Identifies the exact parameters, codebook and topology.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.store.checksum()?.as_bytes());
        hash_tensor(&mut h, CODEBOOK_KEY, &self.codebook.to_tensor(DType::F32, &Device::Cpu)?)?;
        h.update(self.topology.hash().as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn manifest(&self) -> Result<CodecManifest> {
        Ok(CodecManifest {
            n: self.latent_cells(),
            l: self.config.latent_dim,
            s: self.config.codebook_size,
            vertex_count: self.topology.vertex_count(),
            topology_hash: self.topology.hash(),
            data_fingerprint: self.data_fingerprint.clone(),
            reconstruction_pve_mm: self.reconstruction_pve_mm,
            fingerprint: self.fingerprint()?,
            config: self.config.clone(),
        })
    }

    /// Writes `weights.safetensors`, `manifest.json` and `topology.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<CodecManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut map: HashMap<String, Tensor> = self.store.tensors().into_iter().collect();
        map.insert(CODEBOOK_KEY.into(), self.codebook.to_tensor(DType::F32, &Device::Cpu)?);
        let usage: Vec<f64> = self.codebook.usage_counts().iter().map(|&u| u as f64).collect();
        map.insert(USAGE_KEY.into(), Tensor::from_vec(usage, self.config.codebook_size, &Device::Cpu)?);
        let path = dir.join(WEIGHTS_FILE);
        candle_core::safetensors::save(&map, &path).map_err(|e| Error::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.topology.save_json(&dir.join(TOPOLOGY_FILE))?;
        let manifest = self.manifest()?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a codec directory. Frozen codecs (`trainable = false`) expose no
    /// variables and never accumulate gradients.
    pub fn load(dir: &Path, dtype: DType, device: &Device, trainable: bool) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let topology = Arc::new(MeshTopology::load_json(&dir.join(TOPOLOGY_FILE))?);
        if topology.hash() != manifest.topology_hash {
            return Err(config_err!("codec topology file does not match its manifest"));
        }
        let path = dir.join(WEIGHTS_FILE);
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing codec weights")));
        }
        let mut tensors = candle_core::safetensors::load(&path, &Device::Cpu)
            .map_err(|e| Error::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let entries = tensors
            .remove(CODEBOOK_KEY)
            .ok_or_else(|| config_err!("codec weights have no codebook"))?;
        let usage = tensors.remove(USAGE_KEY);
        let (s, l) = entries.dims2()?;
        let mut codebook = Codebook::new(s, l, entries.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)?;
        if let Some(u) = usage {
            codebook.set_usage_counts(u.to_dtype(DType::F64)?.to_vec1::<f64>()?.into_iter().map(|x| x as u64).collect())?;
        }
        let tensors = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, t.to_device(device)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        let store = ParamStore::from_tensors(tensors, dtype, device, trainable);
        let mut codec = Self::assemble(manifest.config.clone(), topology, store, codebook)?;
        codec.data_fingerprint = manifest.data_fingerprint.clone();
        codec.reconstruction_pve_mm = manifest.reconstruction_pve_mm;
        if dtype == DType::F32 && codec.fingerprint()? != manifest.fingerprint {
            return Err(config_err!("codec weights do not match the manifest fingerprint"));
        }
        Ok(codec)
    }

    pub fn read_manifest(dir: &Path) -> Result<CodecManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Frozen copy sharing nothing mutable with `self`.
    pub fn frozen_copy(&self) -> Result<Self> {
        let tensors = self.store.snapshot()?.into_iter().collect();
        let store = ParamStore::from_tensors(tensors, self.dtype(), self.device(), false);
        let mut codec = Self::assemble(self.config.clone(), self.topology.clone(), store, self.codebook.clone())?;
        codec.data_fingerprint = self.data_fingerprint.clone();
        codec.reconstruction_pve_mm = self.reconstruction_pve_mm;
        Ok(codec)
    }

    /// Mean squared vertex error plus the weighted commitment term.
    pub fn training_loss(&self, fwd: &VqForward, target: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let recon = (&fwd.reconstruction - target)?.sqr()?.sum(D::Minus1)?.mean_all()?;
        let commit = (&fwd.latent - &fwd.quantized)?.sqr()?.mean_all()?;
        let total = (&recon + (&commit * self.config.commitment_weight)?)?;
        Ok((total, recon, commit))
    }
}
