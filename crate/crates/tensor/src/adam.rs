use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for every tensor of one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |_| params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { config, step: 0, first: zeros(()), second: zeros(()) }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::Param(format!(
                "adam: {} gradients / {} moments for {} parameters",
                grads.len(),
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            p.expect_same_shape(&grads[k])?;
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((w, &g), mk), vk) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mk = b1 * *mk + (T::one() - b1) * g;
                *vk = b2 * *vk + (T::one() - b2) * g * g;
                *w -= step_size * *mk / ((*vk * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
