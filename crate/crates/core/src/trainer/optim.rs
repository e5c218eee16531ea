use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Adam with a cosine learning-rate schedule and global gradient-norm clipping.
pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    base_lr: f64,
    total_steps: usize,
    step: usize,
    clip: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, total_steps: usize, clip: Option<f64>) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Adam {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            base_lr: lr,
            total_steps: total_steps.max(1),
            step: 0,
            clip,
        })
    }

    /// `lr · ½(1 + cos(π · step / total))`.
    pub fn learning_rate(&self) -> f64 {
        let frac = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Backpropagates `loss`, clips, and applies one update. Returns the
    /// gradient norm before clipping.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if let Some(max) = self.clip {
            if norm > max && norm.is_finite() {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.inner.set_learning_rate(self.learning_rate());
        self.inner.step(&grads)?;
        self.step += 1;
        Ok(norm)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cosine_schedule_endpoints() {
        let v = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![v.clone()], 0.1, 10, None).unwrap();
        assert!((opt.learning_rate() - 0.1).abs() < 1e-12);
        for _ in 0..5 {
            opt.backward_step(&v.as_tensor().sqr().unwrap().sum_all().unwrap()).unwrap();
        }
        assert!((opt.learning_rate() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic_with_clipping() {
        let v = Var::new(&[5.0f64, -3.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![v.clone()], 0.1, 400, Some(1.0)).unwrap();
        for _ in 0..400 {
            opt.backward_step(&v.as_tensor().sqr().unwrap().sum_all().unwrap()).unwrap();
        }
        let x = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!(x.iter().all(|a| a.abs() < 0.05), "{x:?}");
    }
}
