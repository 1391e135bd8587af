//! AdamW with a linear warmup to a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for the zero-based optimizer step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
    decay: bool,
    updates: i32,
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: usize,
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// One slot per parameter tensor: `(len, apply_weight_decay)`.
    pub fn new(cfg: AdamWConfig, params: &[(usize, bool)]) -> Self {
        AdamW {
            cfg,
            step: 0,
            slots: params
                .iter()
                .map(|&(n, decay)| Slot {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                    decay,
                    updates: 0,
                })
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. A slot whose gradient is `None` is skipped
    /// entirely, including its moment bookkeeping and weight decay.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) {
        assert_eq!(params.len(), self.slots.len());
        assert_eq!(grads.len(), self.slots.len());
        let lr = T::of(self.cfg.lr_at(self.step));
        self.step += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let eps = T::of(self.cfg.eps);
        let wd = T::of(self.cfg.weight_decay);
        for ((slot, p), g) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            let Some(g) = g else { continue };
            assert_eq!(p.len(), slot.m.len());
            slot.updates += 1;
            let bc1 = T::one() - b1.powi(slot.updates);
            let bc2 = T::one() - b2.powi(slot.updates);
            for i in 0..p.len() {
                let gi = g[i];
                if slot.decay && wd > T::zero() {
                    p[i] = p[i] - lr * wd * p[i];
                }
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
