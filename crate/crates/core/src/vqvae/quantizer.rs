//! Codebook, nearest-code quantization and the straight-through estimator.
//!
//! Token indices are 0-based: a codebook of size `S` yields indices in `0..S`.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};

/// Continuous `N × L` latent, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl LatentGrid {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(invalid!("latent grid needs {rows} × {dim} values, got {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("latent grid has non-finite values"));
        }
        Ok(LatentGrid { rows, dim, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `(1 − t)·self + t·other`.
    pub fn lerp(&self, other: &LatentGrid, t: f32) -> Result<LatentGrid> {
        if self.rows != other.rows || self.dim != other.dim {
            return Err(invalid!("latent grids have different shapes"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        LatentGrid::new(self.rows, self.dim, values)
    }
}

/// `N × L` grid whose rows are codebook entries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGrid {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl QuantizedGrid {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// One codebook index per latent cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct Quantization {
    pub tokens: TokenSequence,
    pub grid: QuantizedGrid,
    /// Mean of `‖sg[z] − z_d‖²` over all grid entries (moves the codes).
    pub codebook_loss: f64,
    /// Mean of `‖z − sg[z_d]‖²` over all grid entries (moves the encoder).
    pub commitment_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f32>,
    usage: Vec<u64>,
    ema_count: Vec<f64>,
    ema_sum: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if size < 2 {
            return Err(config_err!("codebook needs at least 2 entries, got {size}"));
        }
        if dim == 0 || entries.len() != size * dim {
            return Err(config_err!("codebook needs {size} × {dim} values, got {}", entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("codebook has non-finite entries"));
        }
        Ok(Codebook {
            size,
            dim,
            ema_sum: entries.iter().map(|&v| v as f64).collect(),
            ema_count: vec![1.0; size],
            usage: vec![0; size],
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage
    }

    pub fn set_usage_counts(&mut self, usage: Vec<u64>) -> Result<()> {
        if usage.len() != self.size {
            return Err(invalid!("usage counts need {} entries", self.size));
        }
        self.usage = usage;
        Ok(())
    }

    /// Fraction of entries with nonzero usage.
    pub fn usage_fraction(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.size as f64
    }

    pub fn record_usage(&mut self, tokens: &[u32]) {
        for &t in tokens {
            self.usage[t as usize] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Index of the nearest entry in squared Euclidean distance; the lowest
    /// index wins ties.
    pub fn nearest(&self, v: &[f32]) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for (s, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let mut d = 0f64;
            for (a, b) in v.iter().zip(e) {
                let diff = *a as f64 - *b as f64;
                d += diff * diff;
            }
            if d < best.0 {
                best = (d, s as u32);
            }
        }
        best.1
    }

    /// Nearest entry for each `dim`-sized row of `rows`.
    pub fn nearest_rows(&self, rows: &[f32]) -> Vec<u32> {
        rows.chunks_exact(self.dim).map(|r| self.nearest(r)).collect()
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<Quantization> {
        if z.dim != self.dim {
            return Err(invalid!("latent dim {} does not match codebook dim {}", z.dim, self.dim));
        }
        let tokens = TokenSequence(self.nearest_rows(&z.values));
        let grid = self.dequantize(&tokens)?;
        let sq: f64 = z
            .values
            .iter()
            .zip(&grid.values)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / z.values.len().max(1) as f64;
        Ok(Quantization {
            tokens,
            grid,
            codebook_loss: sq,
            commitment_loss: sq,
        })
    }

    pub fn dequantize(&self, tokens: &TokenSequence) -> Result<QuantizedGrid> {
        let mut values = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens.indices() {
            if t as usize >= self.size {
                return Err(invalid!("token {t} is out of range for a codebook of {} entries", self.size));
            }
            values.extend_from_slice(self.entry(t as usize));
        }
        Ok(QuantizedGrid {
            rows: tokens.len(),
            dim: self.dim,
            values,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.entries.clone(), (self.size, self.dim), device)?.to_dtype(dtype)?)
    }

    /// Exponential-moving-average codebook update from a batch of latents
    /// (`rows`, row-major) and their assigned entries.
    pub fn ema_update(&mut self, rows: &[f32], assignments: &[u32], decay: f64) {
        const EPS: f64 = 1e-5;
        let mut counts = vec![0f64; self.size];
        let mut sums = vec![0f64; self.size * self.dim];
        for (r, &a) in rows.chunks_exact(self.dim).zip(assignments) {
            counts[a as usize] += 1.0;
            for (s, v) in sums[a as usize * self.dim..(a as usize + 1) * self.dim].iter_mut().zip(r) {
                *s += *v as f64;
            }
        }
        for (c, n) in self.ema_count.iter_mut().zip(&counts) {
            *c = decay * *c + (1.0 - decay) * n;
        }
        for (m, s) in self.ema_sum.iter_mut().zip(&sums) {
            *m = decay * *m + (1.0 - decay) * s;
        }
        let total: f64 = self.ema_count.iter().sum();
        for i in 0..self.size {
            let smoothed = (self.ema_count[i] + EPS) / (total + self.size as f64 * EPS) * total;
            for d in 0..self.dim {
                self.entries[i * self.dim + d] = (self.ema_sum[i * self.dim + d] / smoothed) as f32;
            }
        }
    }

    /// Resets every entry with zero recorded usage to a random candidate
    /// latent. Returns how many entries were reseeded.
    pub fn reseed_unused(&mut self, candidates: &[f32], rng: &mut impl Rng) -> usize {
        let n = candidates.len() / self.dim;
        if n == 0 {
            return 0;
        }
        let mut reseeded = 0;
        for i in 0..self.size {
            if self.usage[i] == 0 {
                let pick = rng.random_range(0..n);
                let src = &candidates[pick * self.dim..(pick + 1) * self.dim];
                self.entries[i * self.dim..(i + 1) * self.dim].copy_from_slice(src);
                for d in 0..self.dim {
                    self.ema_sum[i * self.dim + d] = src[d] as f64;
                }
                self.ema_count[i] = 1.0;
                reseeded += 1;
            }
        }
        reseeded
    }

    /// K-means (Lloyd) initialization on `rows`. Falls back to uniform
    /// samples in the empirical per-dimension range when there are fewer
    /// distinct rows than entries.
    pub fn kmeans(size: usize, dim: usize, rows: &[f32], iterations: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = rows.len() / dim;
        if n < size {
            return Self::uniform_in_range(size, dim, rows, rng);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut entries: Vec<f32> = order[..size]
            .iter()
            .flat_map(|&i| rows[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let mut cb = Codebook::new(size, dim, entries.clone())?;
        for _ in 0..iterations {
            let assign = cb.nearest_rows(rows);
            let mut sums = vec![0f64; size * dim];
            let mut counts = vec![0usize; size];
            for (r, &a) in rows.chunks_exact(dim).zip(&assign) {
                counts[a as usize] += 1;
                for (s, v) in sums[a as usize * dim..(a as usize + 1) * dim].iter_mut().zip(r) {
                    *s += *v as f64;
                }
            }
            for i in 0..size {
                if counts[i] == 0 {
                    let pick = rng.random_range(0..n);
                    entries[i * dim..(i + 1) * dim].copy_from_slice(&rows[pick * dim..(pick + 1) * dim]);
                } else {
                    for d in 0..dim {
                        entries[i * dim + d] = (sums[i * dim + d] / counts[i] as f64) as f32;
                    }
                }
            }
            cb = Codebook::new(size, dim, entries.clone())?;
        }
        Ok(cb)
    }

    pub fn uniform_in_range(size: usize, dim: usize, rows: &[f32], rng: &mut impl Rng) -> Result<Self> {
        let mut lo = vec![f32::INFINITY; dim];
        let mut hi = vec![f32::NEG_INFINITY; dim];
        for r in rows.chunks_exact(dim) {
            for d in 0..dim {
                lo[d] = lo[d].min(r[d]);
                hi[d] = hi[d].max(r[d]);
            }
        }
        let entries = (0..size * dim)
            .map(|i| {
                let d = i % dim;
                if lo[d] < hi[d] {
                    rng.random_range(lo[d]..hi[d])
                } else if lo[d].is_finite() {
                    lo[d] + rng.random_range(-1e-3..1e-3)
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        Codebook::new(size, dim, entries)
    }

    /// Pairs of entries that are exactly equal.
    pub fn duplicate_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.size {
            for j in i + 1..self.size {
                if self.entry(i) == self.entry(j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Returns `quantized` in the forward pass and routes the incoming gradient
/// unchanged to `latent` in the backward pass.
pub fn straight_through(latent: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if latent.shape() != quantized.shape() {
        return Err(invalid!("straight-through shapes differ: {:?} vs {:?}", latent.dims(), quantized.dims()));
    }
    let latent = latent.contiguous()?;
    let quantized = quantized.contiguous()?;
    Ok(latent.apply_op2_arc(&quantized, Arc::new(Box::new(StraightThrough)))?)
}

struct StraightThrough;

impl CustomOp2 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through"
    }

    fn cpu_fwd(&self, _s1: &CpuStorage, _l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = l2
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("straight-through needs contiguous input".into()))?;
        let out = match s2 {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => candle_core::bail!("straight-through supports f32 and f64"),
        };
        Ok((out, l2.shape().clone()))
    }

    fn bwd(&self, _latent: &Tensor, _quantized: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), None))
    }
}
