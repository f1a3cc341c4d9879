//! Naive reference implementations and finite-difference helpers shared by the
//! integration tests.

#![allow(dead_code)]

use osmd_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.row_len();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the squared distances over distinct pairs of the pooled rows.
pub fn naive_median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in 0..all.len() {
            if i < j {
                d.push(sqdist(all[i], all[j]));
            }
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    let m = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
    m.max(1e-6)
}

/// Biased squared MMD by explicit triple double loop, clamped at zero.
pub fn naive_mmd(s: &[Vec<f64>], p: &[Vec<f64>], sigma: f64) -> f64 {
    let b = s.len() as f64;
    let k = |u: &[f64], v: &[f64]| (-sqdist(u, v) / sigma).exp();
    let mut ss = 0.0;
    let mut sp = 0.0;
    let mut pp = 0.0;
    for i in 0..s.len() {
        for l in 0..s.len() {
            ss += k(&s[i], &s[l]);
            pp += k(&p[i], &p[l]);
        }
        for j in 0..p.len() {
            sp += k(&s[i], &p[j]);
        }
    }
    (ss / (b * b) - 2.0 * sp / (b * b) + pp / (b * b)).max(0.0)
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `Σ_i Σ_j p ln(p / q)` with the epsilon inside both logarithms.
pub fn naive_kl(lp: &[Vec<f64>], ls: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, b) in lp.iter().zip(ls) {
        let p = naive_softmax(a);
        let q = naive_softmax(b);
        for j in 0..p.len() {
            total += p[j] * ((p[j] + 1e-12).ln() - (q[j] + 1e-12).ln());
        }
    }
    total
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

pub fn brute_acer(scores: &[f64], labels: &[usize], thr: f64) -> (f64, f64, f64) {
    let attacks: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    let bona: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let apcer = attacks.iter().filter(|&&s| s >= thr).count() as f64 / attacks.len() as f64;
    let bpcer = bona.iter().filter(|&&s| s < thr).count() as f64 / bona.len() as f64;
    (apcer, bpcer, (apcer + bpcer) / 2.0)
}

/// Per-class IoU from an explicit confusion matrix and the mean over present classes.
pub fn brute_miou(pred: &[usize], gt: &[usize], n: usize, ignore: Option<usize>) -> (Vec<Option<f64>>, f64) {
    let mut cm = vec![vec![0usize; n]; n];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        cm[g][p] += 1;
    }
    let mut per = Vec::new();
    for c in 0..n {
        let tp = cm[c][c];
        let fn_: usize = (0..n).filter(|&k| k != c).map(|k| cm[c][k]).sum();
        let fp: usize = (0..n).filter(|&k| k != c).map(|k| cm[k][c]).sum();
        let denom = tp + fp + fn_;
        per.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let m = present.iter().sum::<f64>() / present.len() as f64;
    (per, m)
}
