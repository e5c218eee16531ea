//! Fixed-width sparse gather with learnable (or constant) per-entry
//! coefficients, implemented as a candle custom op.
//!
//! For an input `x` of shape `(B, cols, C)` and coefficients `a` of shape
//! `(rows, width, K)` the op produces `(B, rows, K, C)`:
//!
//! ```text
//! out[b, i, k, c] = Σ_m a[i, m, k] · x[b, index[i, m], c]
//! ```
//!
//! Padded slots (`index == PAD`) contribute nothing and receive zero gradient.
//! The same op drives mesh convolution (neighborhoods), pooling (cluster
//! members) and unpooling (owning cluster).

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{invalid, Result};

pub const PAD: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    rows: usize,
    cols: usize,
    width: usize,
    index: Arc<Vec<u32>>,
}

impl SparseRows {
    pub fn from_lists(lists: &[Vec<u32>], cols: usize) -> Result<Self> {
        let width = lists.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut index = vec![PAD; lists.len() * width];
        for (i, l) in lists.iter().enumerate() {
            for (m, &j) in l.iter().enumerate() {
                if j as usize >= cols {
                    return Err(invalid!("sparse row {i} references column {j} >= {cols}"));
                }
                index[i * width + m] = j;
            }
        }
        Ok(SparseRows {
            rows: lists.len(),
            cols,
            width,
            index: Arc::new(index),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn index(&self) -> &[u32] {
        &self.index
    }

    /// Number of live (non-padded) entries in row `i`.
    pub fn row_len(&self, i: usize) -> usize {
        self.index[i * self.width..(i + 1) * self.width]
            .iter()
            .filter(|&&j| j != PAD)
            .count()
    }

    /// Applies the gather: `x (B, cols, C)`, `coeffs (rows, width, K)` → `(B, rows, K, C)`.
    pub fn gather(&self, x: &Tensor, coeffs: &Tensor) -> Result<Tensor> {
        let (_, cols, _) = x.dims3()?;
        let (rows, width, _) = coeffs.dims3()?;
        if cols != self.cols || rows != self.rows || width != self.width {
            return Err(invalid!(
                "sparse gather expects x[_, {}, _] and coeffs[{}, {}, _], got x[_, {cols}, _] and coeffs[{rows}, {width}, _]",
                self.cols,
                self.rows,
                self.width
            ));
        }
        let x = x.contiguous()?;
        let coeffs = coeffs.contiguous()?;
        Ok(x.apply_op2_arc(&coeffs, Arc::new(Box::new(Gather { map: self.clone() })))?)
    }

    /// Coefficient tensor holding `values[i][m]` at slot `(i, m, 0)`, zero in padded slots.
    pub fn constant_coeffs(&self, values: &[Vec<f64>], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let mut data = vec![0f64; self.rows * self.width];
        for (i, row) in values.iter().enumerate() {
            for (m, &v) in row.iter().enumerate() {
                data[i * self.width + m] = v;
            }
        }
        Ok(Tensor::from_vec(data, (self.rows, self.width, 1), device)?.to_dtype(dtype)?)
    }
}

struct Gather {
    map: SparseRows,
}

trait Scalar: WithDType + Default {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn forward_kernel<T: Scalar>(map: &SparseRows, x: &[T], a: &[T], batch: usize, chans: usize, k: usize) -> Vec<T> {
    let (rows, cols, width) = (map.rows, map.cols, map.width);
    let mut out = vec![T::default(); batch * rows * k * chans];
    for b in 0..batch {
        let xb = &x[b * cols * chans..(b + 1) * cols * chans];
        for i in 0..rows {
            let ob = &mut out[(b * rows + i) * k * chans..(b * rows + i + 1) * k * chans];
            for m in 0..width {
                let j = map.index[i * width + m];
                if j == PAD {
                    continue;
                }
                let xj = &xb[j as usize * chans..(j as usize + 1) * chans];
                let am = &a[(i * width + m) * k..(i * width + m + 1) * k];
                for (kk, &coef) in am.iter().enumerate() {
                    let o = &mut ob[kk * chans..(kk + 1) * chans];
                    for (dst, &src) in o.iter_mut().zip(xj) {
                        *dst = *dst + coef * src;
                    }
                }
            }
        }
    }
    out
}

fn backward_kernel<T: Scalar>(
    map: &SparseRows,
    x: &[T],
    a: &[T],
    grad: &[T],
    batch: usize,
    chans: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let (rows, cols, width) = (map.rows, map.cols, map.width);
    let mut gx = vec![T::default(); batch * cols * chans];
    let mut ga = vec![T::default(); rows * width * k];
    for b in 0..batch {
        let xb = &x[b * cols * chans..(b + 1) * cols * chans];
        let gxb = &mut gx[b * cols * chans..(b + 1) * cols * chans];
        for i in 0..rows {
            let gb = &grad[(b * rows + i) * k * chans..(b * rows + i + 1) * k * chans];
            for m in 0..width {
                let j = map.index[i * width + m] as usize;
                if j == PAD as usize {
                    continue;
                }
                let slot = (i * width + m) * k;
                for kk in 0..k {
                    let g = &gb[kk * chans..(kk + 1) * chans];
                    let coef = a[slot + kk];
                    let mut dot = T::default();
                    let xj = &xb[j * chans..(j + 1) * chans];
                    let gxj = &mut gxb[j * chans..(j + 1) * chans];
                    for c in 0..chans {
                        gxj[c] = gxj[c] + coef * g[c];
                        dot = dot + g[c] * xj[c];
                    }
                    ga[slot + kk] = ga[slot + kk] + dot;
                }
            }
        }
    }
    (gx, ga)
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("sparse gather needs contiguous inputs"),
    }
}

impl CustomOp2 for Gather {
    fn name(&self) -> &'static str {
        "sparse-gather"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, _, chans) = l1.shape().dims3()?;
        let (_, _, k) = l2.shape().dims3()?;
        let shape = Shape::from((batch, self.map.rows, k, chans));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(a)) => CpuStorage::F32(forward_kernel(
                &self.map,
                contiguous_slice(x, l1)?,
                contiguous_slice(a, l2)?,
                batch,
                chans,
                k,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(a)) => CpuStorage::F64(forward_kernel(
                &self.map,
                contiguous_slice(x, l1)?,
                contiguous_slice(a, l2)?,
                batch,
                chans,
                k,
            )),
            _ => candle_core::bail!("sparse gather supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, a: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (batch, cols, chans) = x.dims3()?;
        let (rows, width, k) = a.dims3()?;
        let grad = grad.contiguous()?;
        let dev = x.device();
        let (gx, ga) = match x.dtype() {
            DType::F32 => {
                let (gx, ga) = backward_kernel(
                    &self.map,
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &a.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    batch,
                    chans,
                    k,
                );
                (Tensor::from_vec(gx, (batch, cols, chans), dev)?, Tensor::from_vec(ga, (rows, width, k), dev)?)
            }
            DType::F64 => {
                let (gx, ga) = backward_kernel(
                    &self.map,
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &a.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    batch,
                    chans,
                    k,
                );
                (Tensor::from_vec(gx, (batch, cols, chans), dev)?, Tensor::from_vec(ga, (rows, width, k), dev)?)
            }
            dt => candle_core::bail!("sparse gather does not support {dt:?}"),
        };
        Ok((Some(gx), Some(ga)))
    }
}
