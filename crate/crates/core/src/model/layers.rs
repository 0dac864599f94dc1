//! Parameterized layers on top of the tensor tape.
//!
//! A network owns two [`ParamSet`]s: trainable parameters and batch-norm
//! running statistics ("buffers"). Layers only store ids, so a network cast to
//! another precision reuses the same layout.

use radiogan_tensor::{BatchStats, Bound, Graph, ParamId, ParamSet, Real, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// He-style gain for a leaky ReLU with the given negative slope.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Registers layers with freshly drawn weights.
pub struct Builder<'a, T, R> {
    pub params: &'a mut ParamSet<T>,
    pub buffers: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(std * self.rng.sample::<f64, _>(StandardNormal)))
    }

    /// 3x3-style convolution with weights `N(0, (gain^2 / fan_in))`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Result<Conv> {
        let std = gain / ((cin * k * k) as f64).sqrt();
        let w = self.normal(&[cout, cin, k, k], std);
        let w = self.params.insert(format!("{name}.weight"), w)?;
        let b = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv { w, b: Some(b), stride, pad: k / 2 })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, gain: f64) -> Result<Linear> {
        let w = self.normal(&[fout, fin], gain / (fin as f64).sqrt());
        let w = self.params.insert(format!("{name}.weight"), w)?;
        let b = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[fout]))?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.params.insert(format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?,
            running_mean: self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: self.buffers.insert(format!("{name}.running_var"), Tensor::ones(&[c]))?,
        })
    }
}

/// Batch statistics source for every batch-norm layer in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch and record its statistics.
    Batch,
    /// Normalize with the stored running averages.
    Frozen,
}

/// One forward pass of one network on a graph.
pub struct Ctx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub bound: &'a Bound,
    pub buffers: &'a ParamSet<T>,
    pub mode: BnMode,
    pub slope: f64,
    pub bn_eps: f64,
    pub observed: Vec<(BatchNorm, BatchStats<T>)>,
    /// Inputs of every leaky ReLU applied so far.
    pub preactivations: Vec<Var>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, bound: &'a Bound, buffers: &'a ParamSet<T>, mode: BnMode, slope: f64, bn_eps: f64) -> Self {
        Self { graph, bound, buffers, mode, slope, bn_eps, observed: Vec::new(), preactivations: Vec::new() }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn conv(&mut self, layer: &Conv, x: Var) -> Result<Var> {
        let b = layer.b.map(|b| self.p(b));
        Ok(self.graph.conv2d(x, self.p(layer.w), b, layer.stride, layer.pad)?)
    }

    pub fn linear(&mut self, layer: &Linear, x: Var) -> Result<Var> {
        let b = layer.b.map(|b| self.p(b));
        Ok(self.graph.linear(x, self.p(layer.w), b)?)
    }

    pub fn bn(&mut self, layer: &BatchNorm, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.p(layer.gamma), self.p(layer.beta));
        let eps = T::lit(self.bn_eps);
        match self.mode {
            BnMode::Batch => {
                let (y, stats) = self.graph.batch_norm(x, gamma, beta, eps)?;
                self.observed.push((*layer, stats));
                Ok(y)
            }
            BnMode::Frozen => {
                let m = self.buffers.get(layer.running_mean).data();
                let v = self.buffers.get(layer.running_var).data();
                Ok(self.graph.batch_norm_frozen(x, gamma, beta, m, v, eps)?)
            }
        }
    }

    pub fn lrelu(&mut self, x: Var) -> Var {
        self.preactivations.push(x);
        self.graph.leaky_relu(x, self.slope)
    }

    /// conv -> batch norm -> leaky ReLU.
    pub fn conv_bn_act(&mut self, conv: &Conv, bn: &BatchNorm, x: Var) -> Result<Var> {
        let h = self.conv(conv, x)?;
        let h = self.bn(bn, h)?;
        Ok(self.lrelu(h))
    }
}

/// Exponential moving average of observed batch statistics; the variance is
/// stored unbiased.
pub fn update_running_stats<T: Real>(buffers: &mut ParamSet<T>, observed: &[(BatchNorm, BatchStats<T>)], momentum: f64) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for (layer, stats) in observed {
        let unbias = if stats.count > 1 { T::lit(stats.count as f64 / (stats.count - 1) as f64) } else { T::one() };
        for (r, &b) in buffers.get_mut(layer.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in buffers.get_mut(layer.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Same names and order, different precision.
pub fn cast_params<T: Real, U: Real>(src: &ParamSet<T>) -> ParamSet<U> {
    let mut out = ParamSet::new();
    for (_, name, t) in src.iter() {
        out.insert(name, t.cast::<U>()).expect("names are unique in the source set");
    }
    out
}

/// Copies every tensor of `src` into `dst` by name; both sets must hold
/// exactly the same names and shapes.
pub fn load_params<T: Real>(dst: &mut ParamSet<T>, src: &ParamSet<T>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(crate::error::Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for (_, name, t) in src.iter() {
        dst.assign(name, t.clone()).map_err(|e| crate::error::Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_ema() {
        let mut params = ParamSet::<f64>::new();
        let mut buffers = ParamSet::<f64>::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let bn = Builder { params: &mut params, buffers: &mut buffers, rng: &mut rng }.batch_norm("bn", 1).unwrap();
        let stats = BatchStats { mean: vec![2.0], var: vec![3.0], count: 4 };
        update_running_stats(&mut buffers, &[(bn, stats)], 0.5);
        assert_eq!(buffers.get(bn.running_mean).data(), &[1.0]);
        // 0.5 * 1 + 0.5 * 3 * 4/3
        assert_eq!(buffers.get(bn.running_var).data(), &[2.5]);
    }
}
