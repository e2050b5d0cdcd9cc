//! AdamW with linear warmup / linear decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup over `warmup` steps to the peak rate, then linear decay
/// to zero at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return (step + 1) as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return 1.0;
        }
        let left = self.total.saturating_sub(step) as f64;
        (left / (self.total - self.warmup) as f64).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        AdamW {
            config,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Apply one update at learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut [T], grads: &mut [T], lr: f64) -> f64 {
        let c = self.config;
        let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            let s = T::lit(c.clip_norm / norm);
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for (((p, &g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            if c.weight_decay != 0.0 {
                *p *= decay;
            }
            *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = Schedule { warmup: 4, total: 12 };
        assert_eq!(s.factor(0), 0.25);
        assert_eq!(s.factor(3), 1.0);
        assert_eq!(s.factor(4), 1.0);
        assert_eq!(s.factor(8), 0.5);
        assert_eq!(s.factor(12), 0.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = AdamW::<f64>::new(
            AdamConfig {
                clip_norm: 0.0,
                ..AdamConfig::default()
            },
            2,
        );
        let mut p = vec![1.0, -1.0];
        let mut g = vec![0.5, -2.0];
        opt.step(&mut p, &mut g, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut opt = AdamW::<f64>::new(AdamConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        let mut g = vec![3.0, 4.0];
        let n = opt.step(&mut p, &mut g, 0.0);
        assert_eq!(n, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
