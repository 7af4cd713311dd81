//! Adam with linear warmup and cosine decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{ComplexTensor, C64};

/// Learning rate at the start of warmup.
pub const WARMUP_START_LR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// L2 coefficient, active only during warmup.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr_peak: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_peak,
            lr_min: 0.0,
            warmup_steps,
            total_steps,
            weight_decay: 1e-9,
        }
    }

    /// Rate used for update number `step` (0-based).
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return WARMUP_START_LR + (self.lr_peak - WARMUP_START_LR) * t;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_min + (self.lr_peak - self.lr_min) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// First and second moments per parameter. Real and imaginary parts are
/// treated as independent coordinates: the second moment of `g.re` lives in
/// `v.re`, that of `g.im` in `v.im`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<ComplexTensor>,
    pub v: Vec<ComplexTensor>,
    pub step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = store.zero_grads().0;
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> f64 {
        let c = self.cfg;
        let lr = c.learning_rate(self.step);
        let decay = if self.step < c.warmup_steps { c.weight_decay } else { 0.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let real = store.is_real(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let theta = store.value_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i] + theta[i] * decay;
                let mi = &mut m.data_mut()[i];
                *mi = *mi * c.beta1 + gi * (1.0 - c.beta1);
                let vi = &mut v.data_mut()[i];
                vi.re = c.beta2 * vi.re + (1.0 - c.beta2) * gi.re * gi.re;
                vi.im = c.beta2 * vi.im + (1.0 - c.beta2) * gi.im * gi.im;
                let (mh, vh) = (*mi / bc1, C64::new(vi.re / bc2, vi.im / bc2));
                let step_re = mh.re / (vh.re.sqrt() + c.eps);
                let step_im = if real { 0.0 } else { mh.im / (vh.im.sqrt() + c.eps) };
                theta[i] -= C64::new(step_re, step_im) * lr;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = AdamConfig { lr_min: 1e-5, ..AdamConfig::new(1e-3, 10, 110) };
        assert_eq!(c.learning_rate(0), WARMUP_START_LR);
        assert!((c.learning_rate(10) - 1e-3).abs() < 1e-15);
        assert!((c.learning_rate(60) - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
        assert!((c.learning_rate(110) - 1e-5).abs() < 1e-15);
        assert!((c.learning_rate(500) - 1e-5).abs() < 1e-15);
        for s in 0..9 {
            assert!(c.learning_rate(s + 1) > c.learning_rate(s));
        }
        for s in 10..110 {
            assert!(c.learning_rate(s + 1) <= c.learning_rate(s));
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", false, ComplexTensor::from_vec(1, 2, vec![C64::new(1.0, 1.0), C64::new(0.0, 0.0)]));
        let r = store.add("r", true, ComplexTensor::from_real(1, 1, &[2.0]));
        let mut cfg = AdamConfig::new(0.1, 0, 10);
        cfg.weight_decay = 0.0;
        let mut adam = Adam::new(cfg, &store);
        let mut g = store.zero_grads();
        g.set(id, ComplexTensor::from_vec(1, 2, vec![C64::new(3.0, -0.5), C64::new(0.0, 0.0)]));
        g.set(r, ComplexTensor::from_real(1, 1, &[-4.0]));
        adam.update(&mut store, &g);
        let w = store.value(id);
        assert!((w.get(0, 0) - C64::new(0.9, 1.1)).norm() < 1e-8);
        assert_eq!(w.get(0, 1), C64::new(0.0, 0.0));
        assert!((store.value(r).get(0, 0) - C64::new(2.1, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn weight_decay_only_in_warmup() {
        let mut store = ParamStore::new();
        let id = store.add("w", true, ComplexTensor::from_real(1, 1, &[1.0]));
        let mut cfg = AdamConfig::new(0.1, 1, 3);
        cfg.weight_decay = 1.0;
        let mut adam = Adam::new(cfg, &store);
        let g = store.zero_grads();
        adam.update(&mut store, &g);
        let after_warmup = store.value(id).get(0, 0).re;
        assert!(after_warmup < 1.0);
        // Past warmup the zero gradient leaves only momentum from the decayed step.
        let m_before = adam.m[0].get(0, 0).re;
        adam.update(&mut store, &g);
        assert!((adam.m[0].get(0, 0).re - 0.9 * m_before).abs() < 1e-15);
    }
}
