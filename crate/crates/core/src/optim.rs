//! Adam with bias correction and a linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fraction of `total_steps` spent warming up. `None` means a constant rate.
    pub warmup_fraction: Option<f64>,
    pub total_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
            warmup_fraction: Some(0.1),
            total_steps: 1000,
        }
    }
}

impl AdamConfig {
    /// Effective learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let Some(frac) = self.warmup_fraction else {
            return self.lr;
        };
        let total = self.total_steps.max(1) as f64;
        let warmup = (frac * total).round();
        let t = t as f64;
        let lr = if warmup > 0.0 && t <= warmup {
            self.lr * t / warmup
        } else if total > warmup {
            self.lr * (total - t) / (total - warmup)
        } else {
            self.lr
        };
        lr.max(0.0)
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: usize,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let first = store
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.numel()])
            .collect();
        let second = store
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.numel()])
            .collect();
        Adam {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step.max(1))
    }

    /// Applies one update to every parameter and zeroes the gradients.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (id, name, t) in store.iter() {
            if t.grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter {name} (#{}) has no gradient",
                    id.index()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let clip_scale = match c.clip_norm {
            Some(max) => {
                let norm: f64 = store
                    .iter()
                    .flat_map(|(_, _, t)| t.grad().unwrap().iter())
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps, wd, clip) = (
            S::lit(lr),
            S::lit(c.eps),
            S::lit(c.weight_decay),
            S::lit(clip_scale),
        );
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let grad = t.grad.take().unwrap();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * clip;
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
            }
            let mut grad = grad;
            grad.iter_mut().for_each(|g| *g = S::zero());
            t.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = one_param(3.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                total_steps: 10,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..10 {
            store.zero_grad();
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.by_name("w").unwrap().item(), 3.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = one_param(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            warmup_fraction: None,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &store);
        store.get_mut(store.id("w").unwrap()).accumulate_grad(&[1.0]);
        opt.step(&mut store).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        let w = store.by_name("w").unwrap().item();
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(store.by_name("w").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = AdamConfig {
            lr: 1.0,
            warmup_fraction: Some(0.1),
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(5), 0.5);
        assert_eq!(cfg.lr_at(10), 1.0);
        assert_eq!(cfg.lr_at(55), 0.5);
        assert_eq!(cfg.lr_at(100), 0.0);
        assert_eq!(cfg.lr_at(150), 0.0);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store = one_param(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains('w'));
    }
}
