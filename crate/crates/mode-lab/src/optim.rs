//! Optimizer and learning-rate schedule for the trainable (non-frozen)
//! parameters: Adam moment estimation with decoupled weight decay, and a
//! cosine decay schedule with optional linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::GradBuf;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Cosine decay from a peak learning rate to (near) zero over a fixed number
/// of steps, optionally preceded by linear warmup from zero. After warmup the
/// schedule is monotone non-increasing, and the final step's rate is at most
/// 1% of the peak.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        if !(peak_lr > 0.0) || !peak_lr.is_finite() {
            return Err(Error::config(format!("peak_lr must be positive, got {}", peak_lr)));
        }
        if total_steps == 0 {
            return Err(Error::config("total_steps must be >= 1"));
        }
        if warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be < total_steps {}",
                warmup_steps, total_steps
            )));
        }
        Ok(CosineSchedule { peak_lr, total_steps, warmup_steps })
    }

    /// Learning rate at step `t` (0-based).
    pub fn lr(&self, t: usize) -> f64 {
        let t = t.min(self.total_steps - 1);
        if t < self.warmup_steps {
            // linear ramp ending at peak on the first post-warmup step
            return self.peak_lr * (t + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span <= 1 {
            return self.peak_lr;
        }
        let progress = (t - self.warmup_steps) as f64 / (span - 1) as f64;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay over the trainable slots of a
/// [`ParamStore`]. Moment buffers are allocated lazily per slot, so frozen
/// parameters cost nothing and are structurally impossible to update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_slots: usize) -> Self {
        AdamW { cfg, step_count: 0, m: vec![None; n_slots], v: vec![None; n_slots] }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update with learning rate `lr`. Slots without a gradient are
    /// treated as zero-gradient (their moments still decay, matching the
    /// usual treatment of parameters absent from a microbatch). Returns an
    /// error if a gradient is non-finite or a slot is frozen yet has a
    /// gradient buffer, which would indicate a wiring bug upstream. The
    /// gradient buffer may carry extra slots past the parameter range (the
    /// training loop uses them for intermediate products); those are ignored.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradBuf, lr: f64) -> Result<()> {
        if grads.n_slots() < params.len() || self.m.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer sized for {} slots, store has {}, grads have {}",
                self.m.len(),
                params.len(),
                grads.n_slots()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for slot in 0..params.len() {
            let has_grad = grads.get(slot).is_some();
            if !params.is_trainable(slot) {
                if has_grad {
                    return Err(Error::config(format!(
                        "gradient accumulated for frozen parameter '{}'",
                        params.name(slot)
                    )));
                }
                continue;
            }
            let n = params.get(slot).len();
            let zero = vec![0.0; n];
            let g = grads.get(slot).unwrap_or(&zero);
            if g.len() != n {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient len {} vs parameter len {} for '{}'", g.len(), n, params.name(slot)),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(
                    "adamw_step",
                    format!("non-finite gradient for '{}'", params.name(slot)),
                ));
            }
            let m = self.m[slot].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[slot].get_or_insert_with(|| vec![0.0; n]);
            let value = params.value_mut(slot);
            for i in 0..n {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value.data[i] -=
                    lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * value.data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let sched = CosineSchedule::new(1e-3, 100, 0).unwrap();
        assert!((sched.lr(0) - 1e-3).abs() < 1e-15);
        assert!(sched.lr(99) <= 0.01 * 1e-3);
        for t in 1..100 {
            assert!(sched.lr(t) <= sched.lr(t - 1) + 1e-18);
        }
    }

    #[test]
    fn cosine_with_warmup() {
        let sched = CosineSchedule::new(1e-3, 20, 5).unwrap();
        for t in 1..5 {
            assert!(sched.lr(t) > sched.lr(t - 1));
        }
        assert!((sched.lr(5) - 1e-3).abs() < 1e-15);
        for t in 6..20 {
            assert!(sched.lr(t) <= sched.lr(t - 1));
        }
        assert!(sched.lr(19) <= 0.01 * 1e-3);
    }

    #[test]
    fn cosine_rejects_bad_config() {
        assert!(CosineSchedule::new(0.0, 10, 0).is_err());
        assert!(CosineSchedule::new(1e-3, 0, 0).is_err());
        assert!(CosineSchedule::new(1e-3, 10, 10).is_err());
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // One parameter w = 1.0, gradient 0.5, lr 0.1, defaults otherwise.
        let mut store = ParamStore::new();
        let slot = store.register("w", Tensor::scalar(1.0), true).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, store.len());
        let mut grads = GradBuf::new(store.len());
        grads.add(slot, &[0.5]);
        opt.step(&mut store, &grads, 0.1).unwrap();
        // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25
        // update = 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)
        let expected = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8) + 0.01);
        let got = store.get(slot).data[0];
        assert!((got - expected).abs() < 1e-12, "got {}, want {}", got, expected);
    }

    #[test]
    fn frozen_params_never_move_and_reject_grads() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(1.0), true).unwrap();
        let f = store.register("frozen", Tensor::scalar(2.0), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), store.len());
        let mut grads = GradBuf::new(store.len());
        grads.add(w, &[1.0]);
        opt.step(&mut store, &grads, 0.01).unwrap();
        assert_eq!(store.get(f).data[0], 2.0);

        let mut bad = GradBuf::new(store.len());
        bad.add(f, &[1.0]);
        assert!(opt.step(&mut store, &bad, 0.01).is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient, decay shrinks the weight multiplicatively and
        // the moments stay empty of gradient signal.
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(4.0), true).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, store.len());
        let grads = GradBuf::new(store.len());
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert!((store.get(w).data[0] - (4.0 - 0.1 * 0.5 * 4.0)).abs() < 1e-12);
    }
}
