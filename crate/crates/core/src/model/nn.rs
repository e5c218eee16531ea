//! Dense layers and transformer blocks built on [`Params`].

use candle_core::{DType, Device, Tensor, D};

use crate::error::{invalid, Result};
use crate::params::{Init, Params};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(c_in: usize, c_out: usize, p: Params) -> Result<Self> {
        let bound = (1.0 / c_in as f64).sqrt();
        Ok(Linear {
            weight: p.get((c_out, c_in), "weight", Init::Uniform(bound))?,
            bias: p.get(c_out, "bias", Init::Zeros)?,
        })
    }

    /// Zero-initialized, so the layer starts as the constant `0`.
    pub fn zeros(c_in: usize, c_out: usize, p: Params) -> Result<Self> {
        Ok(Linear {
            weight: p.get((c_out, c_in), "weight", Init::Zeros)?,
            bias: p.get(c_out, "bias", Init::Zeros)?,
        })
    }

    /// `(…, c_in)` → `(…, c_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(dim: usize, p: Params) -> Result<Self> {
        Ok(LayerNorm {
            gamma: p.get(dim, "gamma", Init::Const(1.0))?,
            beta: p.get(dim, "beta", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, p: Params) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid!("attention width {dim} is not divisible by {heads} heads"));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(dim, dim, p.pp("q"))?,
            k: Linear::new(dim, dim, p.pp("k"))?,
            v: Linear::new(dim, dim, p.pp("v"))?,
            out: Linear::new(dim, dim, p.pp("out"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query (B, Nq, D)` attends over `context (B, Nk, D)`.
    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(context)?)?;
        let v = self.split(&self.v.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        self.out.forward(&mixed)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    a: Linear,
    b: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, p: Params) -> Result<Self> {
        Ok(FeedForward {
            a: Linear::new(dim, hidden, p.pp("a"))?,
            b: Linear::new(hidden, dim, p.pp("b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x)?.relu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(dim: usize, heads: usize, hidden: usize, p: Params) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(dim, p.pp("norm1"))?,
            attn: MultiHeadAttention::new(dim, heads, p.pp("attn"))?,
            norm2: LayerNorm::new(dim, p.pp("norm2"))?,
            ff: FeedForward::new(dim, hidden, p.pp("ff"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.ff.forward(&self.norm2.forward(&x)?)?;
        Ok((x + h)?)
    }
}

/// Pre-norm block: self-attention over the queries, cross-attention into
/// `memory`, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(dim: usize, heads: usize, hidden: usize, p: Params) -> Result<Self> {
        Ok(DecoderLayer {
            norm1: LayerNorm::new(dim, p.pp("norm1"))?,
            self_attn: MultiHeadAttention::new(dim, heads, p.pp("self_attn"))?,
            norm2: LayerNorm::new(dim, p.pp("norm2"))?,
            cross_attn: MultiHeadAttention::new(dim, heads, p.pp("cross_attn"))?,
            norm3: LayerNorm::new(dim, p.pp("norm3"))?,
            ff: FeedForward::new(dim, hidden, p.pp("ff"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory)?)?;
        let h = self.ff.forward(&self.norm3.forward(&x)?)?;
        Ok((x + h)?)
    }
}

/// Sinusoidal position table `(n, dim)`: `sin(pos / 10000^(2i/dim))` in even
/// columns, the matching cosine in odd ones.
pub fn sinusoidal_encoding(n: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut table = vec![0f64; n * dim];
    for pos in 0..n {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(table, (n, dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn layer_norm_output_is_standardized() {
        let store = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let ln = LayerNorm::new(8, store.root().pp("ln")).unwrap();
        let x = Tensor::randn(0f64, 3.0, (4, 8), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-3, "{m} {v}");
        }
    }

    #[test]
    fn attention_matches_a_loop_oracle() {
        let store = ParamStore::new(DType::F64, &Device::Cpu, 3);
        let mha = MultiHeadAttention::new(4, 2, store.root().pp("mha")).unwrap();
        let q = Tensor::randn(0f64, 1.0, (1, 3, 4), &Device::Cpu).unwrap();
        let c = Tensor::randn(0f64, 1.0, (1, 5, 4), &Device::Cpu).unwrap();
        let got = mha.forward(&q, &c).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();

        let proj = |l: &Linear, x: &Tensor| l.forward(x).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let (qs, ks, vs) = (proj(&mha.q, &q), proj(&mha.k, &c), proj(&mha.v, &c));
        let mut mixed = vec![vec![0.0; 4]; 3];
        for h in 0..2 {
            for i in 0..3 {
                let scores: Vec<f64> = (0..5)
                    .map(|j| (0..2).map(|d| qs[i][h * 2 + d] * ks[j][h * 2 + d]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..5 {
                    let a = (scores[j] - mx).exp() / z;
                    for d in 0..2 {
                        mixed[i][h * 2 + d] += a * vs[j][h * 2 + d];
                    }
                }
            }
        }
        let mixed = Tensor::new(mixed, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let want = mha.out.forward(&mixed).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoidal_table_values() {
        let t = sinusoidal_encoding(3, 4, DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(t[0], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((t[2][0] - 2f64.sin()).abs() < 1e-15);
        assert!((t[2][3] - (2.0 * 0.01f64).cos()).abs() < 1e-15);
    }
}
