use candle_core::Tensor;

use super::sparse::SparseRows;
use crate::error::{invalid, Result};
use crate::params::{Init, Params};

/// Neighborhood convolution with globally shared weight bases and
/// per-vertex, per-neighbor mixing coefficients:
///
/// ```text
/// y_i = Σ_{j ∈ N(i)} (Σ_k α[i, j, k] · W_k)ᵀ x_j + b
/// ```
///
/// `W_k` are `C_in × C_out` and shared by every vertex; `α` is local.
#[derive(Clone, Debug)]
pub struct MeshConv {
    neighbors: SparseRows,
    bases: Tensor,
    coeffs: Tensor,
    bias: Tensor,
    c_in: usize,
    c_out: usize,
    basis_count: usize,
}

impl MeshConv {
    pub fn new(neighbors: SparseRows, c_in: usize, c_out: usize, basis_count: usize, p: Params) -> Result<Self> {
        if basis_count == 0 || c_in == 0 || c_out == 0 {
            return Err(invalid!("mesh conv needs positive channel and basis counts"));
        }
        let (v, m) = (neighbors.rows(), neighbors.width());
        let avg_degree = (0..v).map(|i| neighbors.row_len(i)).sum::<usize>() as f64 / v.max(1) as f64;
        let coeff_bound = (3.0 / (avg_degree * basis_count as f64)).sqrt();
        let coeffs = p.get((v, m, basis_count), "coeffs", Init::Uniform(coeff_bound))?;
        let bases = p.get((basis_count, c_in, c_out), "bases", Init::Normal((1.0 / c_in as f64).sqrt()))?;
        let bias = p.get(c_out, "bias", Init::Zeros)?;
        Ok(MeshConv {
            neighbors,
            bases,
            coeffs,
            bias,
            c_in,
            c_out,
            basis_count,
        })
    }

    /// `x (B, V, C_in)` → `(B, V, C_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, v, c) = x.dims3()?;
        if v != self.neighbors.cols() || c != self.c_in {
            return Err(invalid!(
                "mesh conv expects (_, {}, {}), got {:?}",
                self.neighbors.cols(),
                self.c_in,
                x.dims()
            ));
        }
        let rows = self.neighbors.rows();
        let mixed = self.neighbors.gather(x, &self.coeffs)?;
        let flat = mixed.reshape((b * rows, self.basis_count * self.c_in))?;
        let w = self.bases.reshape((self.basis_count * self.c_in, self.c_out))?;
        Ok(flat.matmul(&w)?.reshape((b, rows, self.c_out))?.broadcast_add(&self.bias)?)
    }

    pub fn bases(&self) -> &Tensor {
        &self.bases
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn neighbors(&self) -> &SparseRows {
        &self.neighbors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar reference: y[b,i,o] = Σ_j Σ_k α[i,j,k] Σ_c x[b,j,c] W[k,c,o] + bias[o].
    fn loop_oracle(lists: &[Vec<u32>], x: &[Vec<Vec<f64>>], coeffs: &[Vec<Vec<f64>>], w: &[Vec<Vec<f64>>], bias: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let c_out = bias.len();
        x.iter()
            .map(|xb| {
                lists
                    .iter()
                    .enumerate()
                    .map(|(i, nbrs)| {
                        (0..c_out)
                            .map(|o| {
                                let mut s = bias[o];
                                for (m, &j) in nbrs.iter().enumerate() {
                                    for (k, wk) in w.iter().enumerate() {
                                        for (c, xv) in xb[j as usize].iter().enumerate() {
                                            s += coeffs[i][m][k] * xv * wk[c][o];
                                        }
                                    }
                                }
                                s
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn random_lists(rng: &mut impl Rng, v: usize) -> Vec<Vec<u32>> {
        (0..v)
            .map(|i| {
                let mut l = vec![i as u32];
                for j in 0..v as u32 {
                    if j as usize != i && rng.random_bool(0.4) {
                        l.push(j);
                    }
                }
                l
            })
            .collect()
    }

    #[test]
    fn self_only_single_basis_identity_is_identity() {
        let dev = Device::Cpu;
        let lists: Vec<Vec<u32>> = (0..5).map(|i| vec![i]).collect();
        let map = SparseRows::from_lists(&lists, 5).unwrap();
        let mut t = std::collections::HashMap::new();
        t.insert("coeffs".to_string(), Tensor::ones((5, 1, 1), DType::F64, &dev).unwrap());
        t.insert("bases".to_string(), Tensor::eye(3, DType::F64, &dev).unwrap().reshape((1, 3, 3)).unwrap());
        t.insert("bias".to_string(), Tensor::zeros(3, DType::F64, &dev).unwrap());
        let store = ParamStore::from_tensors(t, DType::F64, &dev, false);
        let conv = MeshConv::new(map, 3, 3, 1, store.root()).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 3), &dev).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.to_vec3::<f64>().unwrap(), x.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn zero_input_gives_bias() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lists = random_lists(&mut rng, 6);
        let store = ParamStore::new(DType::F64, &dev, 2);
        let conv = MeshConv::new(SparseRows::from_lists(&lists, 6).unwrap(), 2, 4, 3, store.root()).unwrap();
        let bias = Tensor::new(&[0.5f64, -1.0, 2.0, 0.25], &dev).unwrap();
        let conv = MeshConv { bias: bias.clone(), ..conv };
        let y = conv.forward(&Tensor::zeros((1, 6, 2), DType::F64, &dev).unwrap()).unwrap();
        for row in &y.to_vec3::<f64>().unwrap()[0] {
            assert_eq!(row, &bias.to_vec1::<f64>().unwrap());
        }
    }

    #[test]
    fn matches_triple_loop_on_50_random_configurations() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let v = rng.random_range(2..9);
            let (c_in, c_out, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let lists = random_lists(&mut rng, v);
            let store = ParamStore::new(DType::F64, &dev, trial);
            let conv = MeshConv::new(SparseRows::from_lists(&lists, v).unwrap(), c_in, c_out, k, store.root()).unwrap();
            let conv = MeshConv {
                bias: Tensor::randn(0f64, 1.0, c_out, &dev).unwrap(),
                ..conv
            };
            let x = Tensor::randn(0f64, 1.0, (2, v, c_in), &dev).unwrap();
            let y = conv.forward(&x).unwrap().to_vec3::<f64>().unwrap();
            let expect = loop_oracle(
                &lists,
                &x.to_vec3().unwrap(),
                &conv.coeffs().to_vec3().unwrap(),
                &conv.bases().to_vec3().unwrap(),
                &conv.bias().to_vec1().unwrap(),
            );
            for (a, b) in y.iter().flatten().flatten().zip(expect.iter().flatten().flatten()) {
                assert!((a - b).abs() < 1e-6, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn small_case_v6_c2_k2() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lists = random_lists(&mut rng, 6);
        let store = ParamStore::new(DType::F64, &dev, 9);
        let conv = MeshConv::new(SparseRows::from_lists(&lists, 6).unwrap(), 2, 2, 2, store.root()).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 6, 2), &dev).unwrap();
        let y = conv.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        let expect = loop_oracle(
            &lists,
            &x.to_vec3().unwrap(),
            &conv.coeffs().to_vec3().unwrap(),
            &conv.bases().to_vec3().unwrap(),
            &conv.bias().to_vec1().unwrap(),
        );
        for (a, b) in y.iter().flatten().flatten().zip(expect.iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_feature_shape_is_rejected() {
        let dev = Device::Cpu;
        let store = ParamStore::new(DType::F32, &dev, 0);
        let lists: Vec<Vec<u32>> = (0..4).map(|i| vec![i]).collect();
        let conv = MeshConv::new(SparseRows::from_lists(&lists, 4).unwrap(), 3, 2, 2, store.root()).unwrap();
        assert!(conv.forward(&Tensor::zeros((1, 5, 3), DType::F32, &dev).unwrap()).is_err());
    }
}
