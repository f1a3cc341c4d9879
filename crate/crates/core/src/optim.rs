//! SGD with momentum and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine warm-up to the base rate over `pct_start` of training, then cosine
    /// annealing down to `base / (div_factor · final_div_factor)`.
    OneCycle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

fn cosine(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos()) / 2.0
}

impl OneCycle {
    /// Rate at `step` of `total` for peak rate `max_lr`.
    pub fn lr(&self, max_lr: f64, step: u64, total: u64) -> f64 {
        let initial = max_lr / self.div_factor;
        let last = initial / self.final_div_factor;
        if total <= 1 {
            return max_lr;
        }
        let up = ((self.pct_start * total as f64).round() as u64).max(1);
        if step < up {
            cosine(initial, max_lr, step as f64 / up as f64)
        } else {
            let down = (total - up).max(1);
            cosine(max_lr, last, (step - up) as f64 / down as f64)
        }
    }
}

pub fn learning_rate(schedule: Schedule, base: f64, step: u64, total: u64) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::OneCycle => OneCycle::default().lr(base, step, total),
    }
}

/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("optimizer: momentum {} outside [0, 1)", momentum)));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("optimizer: weight_decay {} < 0", weight_decay)));
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::structural(name.clone(), "gradient shape differs from parameter"));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * pi;
            }
            p.axpy(-lr, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.9, 0.0).unwrap();
        opt.step(&mut store, &grads, 0.1).unwrap();
        opt.step(&mut store, &grads, 0.1).unwrap();
        // 1 - 0.1·1 - 0.1·1.9
        assert!((store.get("w").unwrap().item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn one_cycle_peaks_then_decays() {
        let oc = OneCycle::default();
        let lrs: Vec<f64> = (0..100).map(|s| oc.lr(0.01, s, 100)).collect();
        assert!((lrs[0] - 0.01 / 25.0).abs() < 1e-15);
        assert!((lrs[30] - 0.01).abs() < 1e-15);
        assert!(lrs[99] < lrs[50] && lrs[50] < lrs[30]);
        assert!(lrs[10] < lrs[20]);
    }
}
