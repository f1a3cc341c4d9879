//! Weighting of the transfer, translation and task losses.
//!
//! `L_total = α·L_JDN + β·L_CTN + η·L_TTL` with `η = 1`. Each update first picks
//! the weights that put both auxiliary terms at `target_ratio · L_TTL`, nudges them
//! by a clipped gradient-norm factor, rescales back onto the same total magnitude,
//! and finally smooths with an exponential moving average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The task-loss weight. Never changes.
pub const ETA: f64 = 1.0;
/// Floor on an auxiliary loss when dividing by it.
pub const LOSS_EPS: f64 = 1e-12;
pub const CORRECTION_MIN: f64 = 0.5;
pub const CORRECTION_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub target_ratio: f64,
    pub ema_decay: f64,
    /// Whether the transfer (α) and translation (β) slots carry a loss at all.
    pub use_alpha: bool,
    pub use_beta: bool,
    /// Number of updates applied so far; the first one is not smoothed.
    pub updates: u64,
}

impl LossWeights {
    pub fn new(target_ratio: f64, ema_decay: f64) -> Result<Self> {
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            return Err(Error::Config(format!("balance: target_ratio {} outside (0, 1]", target_ratio)));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("balance: ema_decay {} outside [0, 1)", ema_decay)));
        }
        Ok(LossWeights {
            alpha: 0.0,
            beta: 0.0,
            target_ratio,
            ema_decay,
            use_alpha: true,
            use_beta: true,
            updates: 0,
        })
    }

    /// Restricts the update to the auxiliary slots that are in use.
    pub fn with_slots(mut self, use_alpha: bool, use_beta: bool) -> Self {
        self.use_alpha = use_alpha;
        self.use_beta = use_beta;
        self
    }

    pub fn eta(&self) -> f64 {
        ETA
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLosses {
    pub l_jdn: f64,
    pub l_ctn: f64,
    pub l_ttl: f64,
}

/// Gradient norms of each loss on the shared-encoder parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub g_jdn: f64,
    pub g_ctn: f64,
    pub g_ttl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_jdn: f64,
    pub l_ctn: f64,
    pub l_ttl: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub l_total: f64,
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("balance: {} is {}", name, v)))
    }
}

fn correction(mean: f64, g: f64) -> f64 {
    if mean <= 0.0 {
        1.0
    } else if g <= 0.0 {
        CORRECTION_MAX
    } else {
        (mean / g).clamp(CORRECTION_MIN, CORRECTION_MAX)
    }
}

pub fn update_weights(raw: RawLosses, norms: GradNorms, w: &LossWeights) -> Result<LossWeights> {
    for (n, v) in [
        ("l_jdn", raw.l_jdn),
        ("l_ctn", raw.l_ctn),
        ("l_ttl", raw.l_ttl),
        ("g_jdn", norms.g_jdn),
        ("g_ctn", norms.g_ctn),
        ("g_ttl", norms.g_ttl),
    ] {
        finite(n, v)?;
    }
    let l_a = if w.use_alpha { raw.l_jdn } else { 0.0 };
    let l_b = if w.use_beta { raw.l_ctn } else { 0.0 };
    if l_a == 0.0 && l_b == 0.0 && raw.l_ttl == 0.0 {
        return Ok(*w);
    }

    let target = w.target_ratio * raw.l_ttl;
    let mut a = if w.use_alpha { target / l_a.max(LOSS_EPS) } else { 0.0 };
    let mut b = if w.use_beta { target / l_b.max(LOSS_EPS) } else { 0.0 };

    let active: Vec<f64> = [(w.use_alpha, norms.g_jdn), (w.use_beta, norms.g_ctn), (true, norms.g_ttl)]
        .into_iter()
        .filter_map(|(on, g)| on.then_some(g))
        .collect();
    let mean = active.iter().sum::<f64>() / active.len() as f64;
    let (ca, cb) = (correction(mean, norms.g_jdn), correction(mean, norms.g_ctn));
    // Equal factors cancel under the rescale; skipping it keeps the magnitude rule exact.
    if w.use_alpha && w.use_beta && ca != cb {
        let before = a * l_a + b * l_b;
        let after = a * ca * l_a + b * cb * l_b;
        if after > 0.0 {
            let k = before / after;
            a *= ca * k;
            b *= cb * k;
        }
    }

    let mut next = *w;
    if w.updates == 0 || w.ema_decay == 0.0 {
        next.alpha = a;
        next.beta = b;
    } else {
        let d = w.ema_decay;
        next.alpha = d * w.alpha + (1.0 - d) * a;
        next.beta = d * w.beta + (1.0 - d) * b;
    }
    next.updates = w.updates + 1;
    finite("alpha", next.alpha)?;
    finite("beta", next.beta)?;
    Ok(next)
}

/// `α·L_JDN + β·L_CTN + η·L_TTL` as plain numbers.
pub fn total_loss(raw: RawLosses, w: &LossWeights) -> Result<LossReport> {
    finite("l_jdn", raw.l_jdn)?;
    finite("l_ctn", raw.l_ctn)?;
    finite("l_ttl", raw.l_ttl)?;
    let l_total = w.alpha * raw.l_jdn + w.beta * raw.l_ctn + ETA * raw.l_ttl;
    finite("l_total", l_total)?;
    Ok(LossReport {
        l_jdn: raw.l_jdn,
        l_ctn: raw.l_ctn,
        l_ttl: raw.l_ttl,
        alpha: w.alpha,
        beta: w.beta,
        eta: ETA,
        l_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EQUAL: GradNorms = GradNorms {
        g_jdn: 1.0,
        g_ctn: 1.0,
        g_ttl: 1.0,
    };

    #[test]
    fn worked_example() {
        let w = LossWeights::new(0.1, 0.0).unwrap();
        let raw = RawLosses {
            l_jdn: 5.0,
            l_ctn: 0.5,
            l_ttl: 1.0,
        };
        let w = update_weights(raw, EQUAL, &w).unwrap();
        assert_eq!((w.alpha, w.beta), (0.02, 0.2));
        assert_eq!(total_loss(raw, &w).unwrap().l_total, 1.2);
    }

    #[test]
    fn unequal_norms_keep_total_aux_magnitude() {
        let w = LossWeights::new(0.1, 0.0).unwrap();
        let raw = RawLosses {
            l_jdn: 2.0,
            l_ctn: 0.3,
            l_ttl: 0.8,
        };
        let n = GradNorms {
            g_jdn: 4.0,
            g_ctn: 0.1,
            g_ttl: 1.0,
        };
        let w = update_weights(raw, n, &w).unwrap();
        assert!((w.alpha * 2.0 + w.beta * 0.3 - 0.16).abs() < 1e-12);
        // the loss with the large gradient is down-weighted
        assert!(w.alpha * 2.0 < 0.08);
    }

    #[test]
    fn ema_blends_after_first_update() {
        let w = LossWeights::new(0.1, 0.9).unwrap();
        let r1 = RawLosses {
            l_jdn: 1.0,
            l_ctn: 1.0,
            l_ttl: 1.0,
        };
        let w = update_weights(r1, EQUAL, &w).unwrap();
        assert_eq!(w.alpha, 0.1);
        let r2 = RawLosses { l_jdn: 0.5, ..r1 };
        let w = update_weights(r2, EQUAL, &w).unwrap();
        assert!((w.alpha - (0.9 * 0.1 + 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn inactive_slot_stays_zero_and_bad_input_errors() {
        let w = LossWeights::new(0.1, 0.0).unwrap().with_slots(true, false);
        let raw = RawLosses {
            l_jdn: 1.0,
            l_ctn: 0.0,
            l_ttl: 1.0,
        };
        let w2 = update_weights(raw, EQUAL, &w).unwrap();
        assert_eq!(w2.beta, 0.0);
        assert!(update_weights(RawLosses { l_ttl: f64::NAN, ..raw }, EQUAL, &w).is_err());
        let zero = RawLosses {
            l_jdn: 0.0,
            l_ctn: 0.0,
            l_ttl: 0.0,
        };
        assert_eq!(update_weights(zero, EQUAL, &w).unwrap(), w);
    }
}
