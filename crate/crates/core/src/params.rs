//! Named parameter storage with seeded initialization.
//!
//! Modules ask a [`Params`] handle for tensors by name; a trainable store
//! hands out [`Var`]-backed tensors, a frozen store hands out plain tensors
//! that never accumulate gradients.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

struct Inner {
    rng: ChaCha8Rng,
    loaded: Option<HashMap<String, Tensor>>,
    entries: BTreeMap<String, (Tensor, Option<Var>)>,
}

#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    trainable: bool,
    inner: Arc<Mutex<Inner>>,
}

impl ParamStore {
    /// Fresh trainable parameters drawn from a seeded generator.
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: device.clone(),
            trainable: true,
            inner: Arc::new(Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(seed),
                loaded: None,
                entries: BTreeMap::new(),
            })),
        }
    }

    /// Parameters taken from existing tensors. Every requested name must be present.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device, trainable: bool) -> Self {
        ParamStore {
            dtype,
            device: device.clone(),
            trainable,
            inner: Arc::new(Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(0),
                loaded: Some(tensors),
                entries: BTreeMap::new(),
            })),
        }
    }

    pub fn load(path: &Path, dtype: DType, device: &Device, trainable: bool) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Runtime(format!("cannot read weights {}: {e}", path.display())))?;
        Ok(Self::from_tensors(tensors, dtype, device, trainable))
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn get(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store lock");
        if let Some((t, _)) = inner.entries.get(&name) {
            return Ok(t.clone());
        }
        let value = match inner.loaded.as_ref() {
            Some(loaded) => {
                let t = loaded
                    .get(&name)
                    .ok_or_else(|| config_err!("missing parameter `{name}` in checkpoint"))?;
                if t.shape() != &shape {
                    return Err(config_err!("parameter `{name}` has shape {:?}, expected {:?}", t.dims(), shape.dims()));
                }
                t.to_dtype(self.dtype)?
            }
            None => {
                let n = shape.elem_count();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Const(c) => vec![c; n],
                    Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
                    Init::Normal(s) => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut inner.rng);
                            z * s
                        })
                        .collect(),
                };
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let (tensor, var) = if self.trainable {
            let var = Var::from_tensor(&value)?;
            (var.as_tensor().clone(), Some(var))
        } else {
            (value.detach(), None)
        };
        inner.entries.insert(name, (tensor.clone(), var));
        Ok(tensor)
    }

    /// Trainable variables in name order (empty for frozen stores).
    pub fn vars(&self) -> Vec<Var> {
        let inner = self.inner.lock().expect("param store lock");
        inner.entries.values().filter_map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store lock");
        inner
            .entries
            .iter()
            .filter_map(|(n, (_, v))| v.clone().map(|v| (n.clone(), v)))
            .collect()
    }

    /// Current values, detached from any graph.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().expect("param store lock");
        inner
            .entries
            .iter()
            .map(|(n, (t, v))| {
                let t = v.as_ref().map(|v| v.as_tensor().clone()).unwrap_or_else(|| t.clone());
                (n.clone(), t.detach())
            })
            .collect()
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| Ok((n, t.copy()?)))
            .collect()
    }

    /// Writes snapshot values back into the trainable variables.
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            if let Some(t) = snapshot.get(&name) {
                var.set(t)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)
            .map_err(|e| Error::Runtime(format!("cannot write weights {}: {e}", path.display())))
    }

    /// SHA-256 over parameter names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            hash_tensor(&mut h, &name, &t)?;
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().values().map(|t| t.elem_count()).sum()
    }
}

pub(crate) fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) -> Result<()> {
    h.update(name.as_bytes());
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F64 => {
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        DType::U32 => {
            for v in t.flatten_all()?.to_vec1::<u32>()? {
                h.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// A prefixed view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
