//! Decoupled-weight-decay Adam, global-norm clipping and the learning-rate
//! schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)` for every trainable tensor, using
    /// the gradient accumulated on it.
    pub fn step(&mut self, params: &mut dyn Parameters, lr: f64) {
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let n = t.numel();
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *w);
            }
        });
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut dyn Parameters, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    params.visit(&mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        params.visit_mut(&mut |_, t| {
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * (scale - 1.0)).collect();
                t.accumulate_grad(&scaled).expect("same shape");
            }
        });
    }
    norm
}

/// Linear warmup from `start` to `peak`, then cosine decay back to `start`
/// at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(start: f64, peak: f64, warmup: usize, total: usize) -> Result<Self> {
        if warmup > total {
            return Err(Error::config(format!("warmup {warmup} exceeds total steps {total}")));
        }
        if !(start >= 0.0 && peak >= 0.0) {
            return Err(Error::config("learning rates must be nonnegative"));
        }
        Ok(Self {
            start,
            peak,
            warmup,
            total,
        })
    }

    /// Rate for the 0-based step `s`.
    pub fn lr(&self, s: usize) -> f64 {
        if s < self.warmup {
            return self.start + (self.peak - self.start) * s as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1);
        let progress = ((s - self.warmup) as f64 / span as f64).min(1.0);
        self.start + (self.peak - self.start) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Tensor);

    impl Parameters for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_steps() {
        let start = vec![1.5, -2.0, 0.25];
        let mut p = One(Tensor::vector(start.clone()).trainable());
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, 0.1);
        }
        assert_eq!(p.0.data(), start.as_slice());

        let mut opt = AdamW::new(AdamWConfig::default());
        let lr = 0.1;
        for k in 1..=3 {
            opt.step(&mut p, lr);
            let factor = (1.0 - lr * 0.02f64).powi(k);
            for (a, b) in p.0.data().iter().zip(&start) {
                assert!((a - b * factor).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(Tensor::vector(vec![0.0, 0.0]).trainable());
        p.0.accumulate_grad(&[3.0, -0.5]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, 0.01);
        assert!((p.0.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.0.data()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut p = One(Tensor::vector(vec![0.0, 0.0]).trainable());
        p.0.accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        let g = p.0.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!((clip_grad_norm(&mut p, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1e-6, 2e-5, 1000, 5000).unwrap();
        assert_eq!(s.lr(0), 1e-6);
        assert!((s.lr(500) - (1e-6 + 0.5 * 1.9e-5)).abs() < 1e-18);
        assert_eq!(s.lr(1000), 2e-5);
        assert!((s.lr(5000) - 1e-6).abs() < 1e-18);
        assert!(Schedule::new(0.0, 1.0, 10, 5).is_err());
    }
}
