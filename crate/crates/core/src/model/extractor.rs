use candle_core::Tensor;

use crate::error::{invalid, Result};
use crate::params::{Init, Params};

/// Per-image output of a feature extractor.
#[derive(Clone, Debug)]
pub struct ImageFeatureMap {
    /// `(B, C, H, W)`.
    pub grid: Tensor,
    /// Spatial mean of `grid`, `(B, C)`.
    pub vector: Tensor,
}

/// Anything that turns a `(B, channels, size, size)` image batch into a feature grid.
pub trait FeatureExtractor {
    fn extract(&self, images: &Tensor) -> Result<ImageFeatureMap>;
    fn channels(&self) -> usize;
}

/// Stack of 3×3 stride-2 convolutions with ReLU.
#[derive(Clone, Debug)]
pub struct ConvExtractor {
    layers: Vec<(Tensor, Tensor)>,
    image_size: usize,
    image_channels: usize,
}

impl ConvExtractor {
    pub fn new(image_size: usize, image_channels: usize, channels: &[usize], p: Params) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len());
        let mut c_in = image_channels;
        for (i, &c_out) in channels.iter().enumerate() {
            let q = p.pp(format!("conv{i}"));
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            layers.push((
                q.get((c_out, c_in, 3, 3), "weight", Init::Normal(std))?,
                q.get(c_out, "bias", Init::Zeros)?,
            ));
            c_in = c_out;
        }
        Ok(ConvExtractor {
            layers,
            image_size,
            image_channels,
        })
    }
}

impl FeatureExtractor for ConvExtractor {
    fn extract(&self, images: &Tensor) -> Result<ImageFeatureMap> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.image_channels || h != self.image_size || w != self.image_size {
            return Err(invalid!(
                "expected images of shape (_, {}, {s}, {s}), got {:?}",
                self.image_channels,
                images.dims(),
                s = self.image_size
            ));
        }
        let mut x = images.clone();
        for (weight, bias) in &self.layers {
            x = x.conv2d(weight, 1, 2, 1, 1)?;
            x = x.broadcast_add(&bias.reshape((1, (), 1, 1))?)?.relu()?;
        }
        let vector = x.mean(3)?.mean(2)?;
        Ok(ImageFeatureMap { grid: x, vector })
    }

    fn channels(&self) -> usize {
        self.layers.last().map_or(self.image_channels, |(w, _)| w.dims()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn desk_stack_gives_four_by_four_grid() {
        let store = ParamStore::new(DType::F32, &Device::Cpu, 0);
        let ex = ConvExtractor::new(64, 1, &[16, 32, 64, 128], store.root()).unwrap();
        let zeros = Tensor::zeros((2, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let f = ex.extract(&zeros).unwrap();
        assert_eq!(f.grid.dims(), &[2, 128, 4, 4]);
        assert_eq!(f.vector.dims(), &[2, 128]);
        assert!(f.grid.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        let wrong = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(ex.extract(&wrong).is_err());
    }

    #[test]
    fn strided_conv_gradient_matches_finite_differences() {
        let store = ParamStore::new(DType::F64, &Device::Cpu, 2);
        let ex = ConvExtractor::new(8, 1, &[3, 2], store.root()).unwrap();
        let img = Tensor::randn(0.5f64, 1.0, (2, 1, 8, 8), &Device::Cpu).unwrap();
        let loss = |ex: &ConvExtractor| -> Tensor {
            let f = ex.extract(&img).unwrap();
            (f.grid.sqr().unwrap().sum_all().unwrap() + f.vector.sum_all().unwrap()).unwrap()
        };
        let var = store.named_vars().into_iter().find(|(n, _)| n == "conv0.weight").unwrap().1;
        let grads = loss(&ex).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for k in [0, 4, 8, 13, 26] {
            let mut plus = base.clone();
            plus[k] += h;
            var.set(&Tensor::from_vec(plus, var.shape(), &Device::Cpu).unwrap()).unwrap();
            let lp = loss(&ex).to_scalar::<f64>().unwrap();
            let mut minus = base.clone();
            minus[k] -= h;
            var.set(&Tensor::from_vec(minus, var.shape(), &Device::Cpu).unwrap()).unwrap();
            let lm = loss(&ex).to_scalar::<f64>().unwrap();
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "{k}: {fd} vs {}", g[k]);
        }
    }
}
