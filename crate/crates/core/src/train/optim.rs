//! AdamW with decoupled weight decay and a step learning-rate schedule.

use crate::model::{ParamGroup, ParamStore};

use super::TrainConfig;

/// Learning rate at `step` (0-based): divided by `decay_factor` once for
/// every decay point `f` with `step >= floor(f · total)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .decay_points
        .iter()
        .filter(|&&f| step >= (f * cfg.steps as f64).floor() as usize)
        .count();
    cfg.lr / cfg.decay_factor.powi(passed as i32)
}

#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    backbone_multiplier: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            backbone_multiplier: cfg.backbone_lr_multiplier,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with base learning rate `lr`; `grads[i]` matches store
    /// entry `i`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let lr_p = match e.group {
                ParamGroup::Backbone => lr * self.backbone_multiplier,
                ParamGroup::Head => lr,
            };
            let decay = if e.decay { 1.0 - lr_p * self.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in e.value.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p = *p * decay - lr_p * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_piecewise_rule() {
        let cfg = TrainConfig {
            steps: 1000,
            ..TrainConfig::default()
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b;
        for (step, want) in [(0, 1e-4), (899, 1e-4), (900, 1e-5), (949, 1e-5), (950, 1e-6), (999, 1e-6)] {
            assert!(close(lr_at(step, &cfg), want), "step {step}");
        }
    }
}
