//! AdamW with decoupled weight decay and linear warmup into a constant rate.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::scalar::Scalar;

use super::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup before the constant rate.
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 200,
        }
    }
}

pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    step: usize,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        let v = store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = (self.step + 1) as f64;
        let warm = (self.cfg.warmup_steps.max(1)) as f64;
        self.cfg.lr * (t / warm).min(1.0)
    }

    /// Apply one update. `grads` maps store indices to gradient tensors;
    /// parameters with `trainable[i] == false` (or no gradient) stay
    /// bit-identical.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &HashMap<usize, ArrayD<S>>,
        trainable: &[bool],
    ) {
        let lr = S::from_f64(self.current_lr());
        self.step += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let bc1 = S::one() - S::from_f64(self.cfg.beta1.powi(self.step as i32));
        let bc2 = S::one() - S::from_f64(self.cfg.beta2.powi(self.step as i32));

        for (idx, grad) in grads {
            if !trainable[*idx] {
                continue;
            }
            let m = &mut self.m[*idx];
            let v = &mut self.v[*idx];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = *m * b1 + g * (S::one() - b1);
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = *v * b2 + g * g * (S::one() - b2);
            });
            let param = &mut store.values[*idx];
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}
