use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::params::ParamStore;

/// Per-parameter gradients keyed like the [`ParamStore`].
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to `min_ratio`·base over
    /// `cycle_steps`, then restart.
    CosineCycle { cycle_steps: usize, min_ratio: f64 },
}

/// Decoupled-weight-decay Adam settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::CosineCycle {
                cycle_steps: 500,
                min_ratio: 0.1,
            },
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &'static str, why: &str| Err(TrainError::Config { key, reason: why.to_string() });
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if let Schedule::CosineCycle { cycle_steps, min_ratio } = self.schedule {
            if cycle_steps == 0 {
                return bad("schedule", "cycle_steps must be positive");
            }
            if !(0.0..=1.0).contains(&min_ratio) {
                return bad("schedule", "min_ratio must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Learning rate at 0-based step `t`.
    pub fn rate(&self, t: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.step_size,
            Schedule::CosineCycle { cycle_steps, min_ratio } => {
                let phase = (t % cycle_steps) as f64 / cycle_steps as f64;
                let lo = min_ratio * self.step_size;
                lo + 0.5 * (self.step_size - lo) * (1.0 + (std::f64::consts::PI * phase).cos())
            }
        }
    }
}

/// Euclidean norm over every gradient entry, in key order.
pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales all gradients so the global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Clips, then applies one update to every parameter that has a
    /// gradient. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: GradMap) -> Result<f64> {
        let c = self.config;
        let norm = clip_gradients(&mut grads, c.clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite("gradient norm"));
        }
        let lr = c.rate(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            let p = params.get_mut(&name)?;
            if p.len() != g.len() {
                return Err(TrainError::GradientShape(name));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_cycle_restarts() {
        let c = OptimizerConfig {
            schedule: Schedule::CosineCycle {
                cycle_steps: 4,
                min_ratio: 0.0,
            },
            ..Default::default()
        };
        assert_eq!(c.rate(0), 1e-3);
        assert!((c.rate(2) - 0.5e-3).abs() < 1e-15);
        assert_eq!(c.rate(4), c.rate(0));
        assert!(c.rate(3) < c.rate(2));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = GradMap::new();
        g.insert("a".into(), vec![3.0]);
        g.insert("b".into(), vec![4.0]);
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        // Bias-corrected Adam's first step is ±lr per coordinate.
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            clip_norm: 0.0,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut g = GradMap::new();
        g.insert("w".into(), vec![0.5, -2.0]);
        opt.step(&mut p, g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[3], vec![2.0, -3.0, 0.5]).unwrap());
        let cfg = OptimizerConfig {
            step_size: 0.05,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg).unwrap();
        for _ in 0..500 {
            let g: Vec<f64> = p.get("w").unwrap().data().iter().map(|w| 2.0 * w).collect();
            opt.step(&mut p, GradMap::from([("w".to_string(), g)])).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn rejects_bad_settings() {
        let c = OptimizerConfig {
            step_size: -1.0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::Config { key: "step_size", .. })));
    }
}
