//! AdamW with decoupled weight decay and per-group learning rates.

use crate::nn::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Multiplier on `lr` for backbone parameters.
    pub backbone_scale: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, backbone_scale: 1.0, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update with the base learning rate multiplied by `lr_factor`.
    /// `grads` holds one gradient per parameter, in store order.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Vec<f64>], lr_factor: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, e) in store.entries_mut().iter_mut().enumerate() {
            let lr = c.lr
                * lr_factor
                * match e.group {
                    ParamGroup::Backbone => c.backbone_scale,
                    ParamGroup::Transformer => 1.0,
                };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in e.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let x = p.as_f64();
                let updated = x - lr * c.weight_decay * x - lr * mhat / (vhat.sqrt() + c.eps);
                *p = T::lit(updated);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamGroup::Transformer);
        store.add("b", Tensor::new(vec![1], vec![0.0]).unwrap(), ParamGroup::Backbone);
        let cfg = AdamWConfig { lr: 0.1, backbone_scale: 0.5, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[vec![3.0, -0.5], vec![2.0]], 1.0);
        let w = store.entries()[0].tensor.data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
        assert!((store.entries()[1].tensor.data()[0] + 0.05).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![1], vec![2.0]).unwrap(), ParamGroup::Transformer);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[vec![0.0]], 1.0);
        assert!((store.entries()[0].tensor.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
