//! Joint adaptation objective: squared MMD between hallucinated and privileged
//! representations plus the KL divergence between their predictive distributions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added inside every logarithm of the KL term.
pub const KL_EPS: f64 = 1e-12;
/// Lower bound on a median-heuristic bandwidth.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed,
    MedianHeuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth_mode: BandwidthMode,
    /// Used when `bandwidth_mode` is `fixed`.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    1.0
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth_mode: BandwidthMode::MedianHeuristic,
            sigma: default_sigma(),
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        KernelConfig {
            bandwidth_mode: BandwidthMode::Fixed,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_mode == BandwidthMode::Fixed && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("kernel: sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Bandwidth for the pooled rows of `a` and `b`.
    pub fn bandwidth(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        self.validate()?;
        match self.bandwidth_mode {
            BandwidthMode::Fixed => Ok(self.sigma),
            BandwidthMode::MedianHeuristic => Ok(median_sq_distance(a, b).max(SIGMA_FLOOR)),
        }
    }
}

/// Median over distinct pairs of the pooled rows of `a` and `b`.
fn median_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.leading())
        .map(|i| a.row(i))
        .chain((0..b.leading()).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

/// `exp(-‖u − v‖² / σ)`.
pub fn gaussian_kernel(u: &[f64], v: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel: sigma must be > 0, got {}", sigma)));
    }
    if u.len() != v.len() {
        return Err(Error::structural("kernel", format!("lengths {} vs {}", u.len(), v.len())));
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d / sigma).exp())
}

fn kernel_mean(tape: &mut Tape, a: Var, b: Var, sigma: f64) -> Result<Var> {
    let d = tape.pairwise_sq_dist(a, b)?;
    let k = tape.scale(d, -1.0 / sigma);
    let k = tape.exp(k);
    Ok(tape.mean(k))
}

/// Biased squared-MMD estimate between `[b × d]` batches, before clamping.
/// The bandwidth is a constant of the graph.
pub fn mmd_unclamped(tape: &mut Tape, rep_s: Var, rep_p: Var, kcfg: &KernelConfig) -> Result<Var> {
    let (ts, tp) = (tape.value(rep_s), tape.value(rep_p));
    if ts.rank() != 2 || ts.shape() != tp.shape() {
        return Err(Error::structural(
            "mmd",
            format!("expected equal [b × d] batches, got {:?} and {:?}", ts.shape(), tp.shape()),
        ));
    }
    if ts.leading() == 0 {
        return Err(Error::Data("mmd: empty batch".into()));
    }
    let sigma = kcfg.bandwidth(ts, tp)?;
    let ss = kernel_mean(tape, rep_s, rep_s, sigma)?;
    let sp = kernel_mean(tape, rep_s, rep_p, sigma)?;
    let pp = kernel_mean(tape, rep_p, rep_p, sigma)?;
    let sp2 = tape.scale(sp, 2.0);
    let v = tape.sub(ss, sp2)?;
    tape.add(v, pp)
}

/// Biased squared-MMD estimate, clamped at zero.
pub fn mmd_marginal(tape: &mut Tape, rep_s: Var, rep_p: Var, kcfg: &KernelConfig) -> Result<Var> {
    let v = mmd_unclamped(tape, rep_s, rep_p, kcfg)?;
    Ok(tape.relu(v))
}

/// Plain-value convenience wrapper around [`mmd_marginal`].
pub fn mmd_value(rep_s: &Tensor, rep_p: &Tensor, kcfg: &KernelConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(rep_s.clone());
    let b = tape.constant(rep_p.clone());
    let v = mmd_marginal(&mut tape, a, b, kcfg)?;
    Ok(tape.value(v).item())
}

fn check_logits(tape: &Tape, logits_p: Var, logits_s: Var) -> Result<()> {
    let (tp, ts) = (tape.value(logits_p), tape.value(logits_s));
    if tp.rank() != 2 || tp.shape() != ts.shape() {
        return Err(Error::structural(
            "conditional_kl",
            format!("expected equal [m × n] logits, got {:?} and {:?}", tp.shape(), ts.shape()),
        ));
    }
    if tp.shape()[1] < 2 {
        return Err(Error::Config("conditional_kl: need at least 2 categories".into()));
    }
    if tp.leading() == 0 {
        return Err(Error::Data("conditional_kl: no samples".into()));
    }
    if !tp.is_finite() || !ts.is_finite() {
        return Err(Error::Numeric("conditional_kl: non-finite logits".into()));
    }
    Ok(())
}

/// `Σ_i Σ_j p_{j|i} · log(p_{j|i} / q_{j|i})` with `p = softmax(logits_p / T)` held
/// constant and `q = softmax(logits_s / T)`.
pub fn conditional_kl_tempered(tape: &mut Tape, logits_p: Var, logits_s: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {}", temperature)));
    }
    check_logits(tape, logits_p, logits_s)?;
    let p = softmax_rows(&tape.value(logits_p).map(|v| v / temperature));
    let entropy_term: f64 = p.data().iter().map(|&pi| pi * (pi + KL_EPS).ln()).sum();
    let scaled = tape.scale(logits_s, 1.0 / temperature);
    let q = tape.softmax_rows(scaled)?;
    let log_q = tape.ln_eps(q, KL_EPS);
    let cross = tape.mul_const(log_q, p)?;
    let cross = tape.sum(cross);
    let cross = tape.scale(cross, -1.0);
    let c = tape.constant(Tensor::scalar(entropy_term));
    tape.add(c, cross)
}

pub fn conditional_kl(tape: &mut Tape, logits_p: Var, logits_s: Var) -> Result<Var> {
    conditional_kl_tempered(tape, logits_p, logits_s, 1.0)
}

/// Plain-value convenience wrapper around [`conditional_kl`].
pub fn conditional_kl_value(logits_p: &Tensor, logits_s: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(logits_p.clone());
    let b = tape.constant(logits_s.clone());
    let v = conditional_kl(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JdnTerms {
    pub dist_marginal: f64,
    pub dist_conditional: f64,
    pub l_jdn: f64,
}

/// Options for spatial inputs and softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JdnConfig {
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Per-batch cap on positions entering the KL term for dense logits.
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_positions() -> usize {
    256
}

impl Default for JdnConfig {
    fn default() -> Self {
        JdnConfig {
            kernel: KernelConfig::default(),
            temperature: default_temperature(),
            max_positions: default_max_positions(),
        }
    }
}

impl JdnConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("jdn: temperature must be > 0, got {}", self.temperature)));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("jdn: max_positions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct JdnOutput {
    pub loss: Var,
    pub terms: JdnTerms,
}

/// Flattens `[b, c, h, w]` representations for classification and pools them for
/// dense tasks; `[b × d]` passes through.
pub fn representation_rows(tape: &mut Tape, rep: Var, dense: bool) -> Result<Var> {
    match tape.value(rep).rank() {
        2 => Ok(rep),
        4 if dense => tape.global_avg_pool(rep),
        _ => tape.flatten(rep),
    }
}

/// Turns dense `[b, n, h, w]` logits into at most `max_positions` rows, with the
/// same positions drawn for both branches.
pub fn logit_rows(
    tape: &mut Tape,
    logits_p: Var,
    logits_s: Var,
    max_positions: usize,
    seed: u64,
) -> Result<(Var, Var)> {
    if tape.value(logits_p).rank() != 4 {
        return Ok((logits_p, logits_s));
    }
    let rp = tape.nchw_to_rows(logits_p)?;
    let rs = tape.nchw_to_rows(logits_s)?;
    let total = tape.value(rp).leading();
    if total <= max_positions {
        return Ok((rp, rs));
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, max_positions).into_vec();
    idx.sort_unstable();
    Ok((tape.select_rows(rp, &idx)?, tape.select_rows(rs, &idx)?))
}

/// `L_JDN = MMD(rep_s, rep_p) + KL(p ‖ q)`. The privileged inputs are treated as
/// constants; `seed` drives position subsampling for dense logits.
pub fn jdn_loss(
    tape: &mut Tape,
    rep_s: Var,
    rep_p: Var,
    logits_s: Var,
    logits_p: Var,
    cfg: &JdnConfig,
    seed: u64,
) -> Result<JdnOutput> {
    let dense = tape.value(logits_s).rank() == 4;
    let rep_p = tape.detach(rep_p);
    let logits_p = tape.detach(logits_p);
    let a = representation_rows(tape, rep_s, dense)?;
    let b = representation_rows(tape, rep_p, dense)?;
    let mmd = mmd_marginal(tape, a, b, &cfg.kernel)?;
    let (lp, ls) = logit_rows(tape, logits_p, logits_s, cfg.max_positions, seed)?;
    let kl = conditional_kl_tempered(tape, lp, ls, cfg.temperature)?;
    let loss = tape.add(mmd, kl)?;
    let terms = JdnTerms {
        dist_marginal: tape.value(mmd).item(),
        dist_conditional: tape.value(kl).item(),
        l_jdn: tape.value(loss).item(),
    };
    Ok(JdnOutput { loss, terms })
}
