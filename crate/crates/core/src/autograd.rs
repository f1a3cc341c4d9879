//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied during one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one. The tape
//! is not consumed, so several losses built on the same forward pass can be
//! differentiated independently.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    Scale(usize, f64),
    Square(usize),
    Exp(usize),
    LnEps(usize, f64),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Concat(Vec<usize>),
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<Option<usize>>,
        count: usize,
    },
    PairwiseSqDist(usize, usize),
    NormalizeRows {
        x: usize,
        scale: Vec<f64>,
    },
    MatMulNt(usize, usize),
    NchwToRows(usize),
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn dims4(t: &Tensor, edge: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::structural(edge, format!("expected rank-4 input, got {:?}", s))),
    }
}

fn dims2(t: &Tensor, edge: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::structural(edge, format!("expected rank-2 input, got {:?}", s))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, edge: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::structural(
            edge,
            format!("shape {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Row-wise softmax of a `[rows × cols]` matrix.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.shape()[t.rank() - 1];
    let mut out = Tensor::zeros(t.shape());
    for (src, dst) in t.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
        softmax_row(src, dst);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A gradient-free copy of `v`: downstream losses never reach `v`'s inputs through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Element-wise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        same_shape(ta, &c, "mul_const")?;
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a.0, c), &[a.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a.0), &[a.0])
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| (x + eps).ln());
        self.push(out, Op::LnEps(a.0, eps), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.push(out, Op::Mean(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Flattens everything after the leading dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.leading(), t.row_len()];
        self.reshape(a, &shape)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let (n, c, h, wd) = dims4(tx, "conv2d.input")?;
        let (o, wc, kh, kw) = dims4(tw, "conv2d.weight")?;
        if wc != c {
            return Err(Error::structural(
                "conv2d",
                format!("input has {} channels, weight expects {}", c, wc),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::structural(
                "conv2d",
                format!("kernel {}x{} stride {} does not fit {}x{}", kh, kw, stride, h, wd),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let bias = match b {
            Some(bv) => {
                let tb = self.value(bv);
                if tb.shape() != [o] {
                    return Err(Error::structural(
                        "conv2d.bias",
                        format!("expected [{}], got {:?}", o, tb.shape()),
                    ));
                }
                Some(tb.data().to_vec())
            }
            None => None,
        };
        let xd = tx.data();
        let wdat = tw.data();
        let mut out = vec![0.0; n * o * ho * wo];
        for bi in 0..n {
            for oc in 0..o {
                let plane = &mut out[(bi * o + oc) * ho * wo..(bi * o + oc + 1) * ho * wo];
                if let Some(bias) = &bias {
                    plane.iter_mut().for_each(|v| *v = bias[oc]);
                }
                for ic in 0..c {
                    let xin = &xd[(bi * c + ic) * h * wd..(bi * c + ic + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((oc * c + ic) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *ov += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, o, ho, wo], out)?;
        let mut inputs = vec![x.0, w.0];
        if let Some(bv) = b {
            inputs.push(bv.0);
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Batch normalization over `[n, c, h, w]` (statistics per channel).
    ///
    /// In training mode the batch statistics are used and returned; otherwise
    /// `running` supplies the mean and variance and nothing is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx, "batch_norm.input")?;
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::structural(
                "batch_norm.affine",
                format!("expected [{}] affine parameters", c),
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let xd = tx.data();
        let (mean, var_biased, stats) = match running {
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..n {
                        s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    mean[ch] = s / m as f64;
                    let mut sq = 0.0;
                    for bi in 0..n {
                        for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            sq += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = sq / m as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::structural("batch_norm.running", "channel mismatch"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = tg.data();
        let bd = tb.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for p in 0..hw {
                    let xh = (xd[base + p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    out[base + p] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let train = stats.is_some();
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
            },
            &[x.0, gamma.0, beta.0],
        );
        Ok((v, stats))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx, "global_avg_pool")?;
        let hw = (h * w) as f64;
        let data = tx.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x.0), &[x.0]))
    }

    /// `x · wᵀ + b` with `x: [n × d]`, `w: [o × d]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = dims2(tx, "linear.input")?;
        let (o, wd) = dims2(tw, "linear.weight")?;
        if wd != d || tb.shape() != [o] {
            return Err(Error::structural(
                "linear",
                format!("input width {} vs weight {:?} / bias {:?}", d, tw.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let xr = &tx.data()[i * d..(i + 1) * d];
            for j in 0..o {
                let wr = &tw.data()[j * d..(j + 1) * d];
                out[i * o + j] = tb.data()[j] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0]))
    }

    /// Concatenation along axis 1 (channels for `[n, c, h, w]`, columns for `[n, d]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::structural("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::structural("concat", "inputs need rank >= 2"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::structural(
                    "concat",
                    format!("shape {:?} incompatible with {:?}", s, first),
                ));
            }
            total += s[1];
        }
        let n = first[0];
        let mut shape = first.clone();
        shape[1] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for bi in 0..n {
            for p in parts {
                let t = self.value(*p);
                data.extend_from_slice(t.row(bi));
            }
        }
        let out = Tensor::new(shape, data)?;
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(out, Op::Concat(idx.clone()), &idx))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        dims2(self.value(x), "softmax_rows")?;
        let out = softmax_rows(self.value(x));
        Ok(self.push(out, Op::SoftmaxRows(x.0), &[x.0]))
    }

    /// Mean cross-entropy of `[rows × classes]` logits against labels; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (r, k) = dims2(t, "cross_entropy")?;
        if labels.len() != r {
            return Err(Error::structural(
                "cross_entropy",
                format!("{} label entries for {} rows", labels.len(), r),
            ));
        }
        let mut probs = vec![0.0; k];
        let mut total = 0.0;
        let mut count = 0;
        for (row, label) in t.data().chunks(k).zip(labels) {
            let Some(y) = *label else { continue };
            if y >= k {
                return Err(Error::Data(format!("label {} out of range for {} classes", y, k)));
            }
            softmax_row(row, &mut probs);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("cross_entropy: no labelled rows".into()));
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                count,
            },
            &[logits.0],
        ))
    }

    /// Squared Euclidean distances between the rows of `a: [n × d]` and `b: [m × d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = dims2(ta, "pairwise_sq_dist.lhs")?;
        let (m, d2) = dims2(tb, "pairwise_sq_dist.rhs")?;
        if d != d2 {
            return Err(Error::structural(
                "pairwise_sq_dist",
                format!("feature widths {} vs {}", d, d2),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = ta.row(i);
            for j in 0..m {
                let br = tb.row(j);
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::PairwiseSqDist(a.0, b.0), &[a.0, b.0]))
    }

    /// Scales each row to unit length: `x / sqrt(‖x‖² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = dims2(t, "normalize_rows")?;
        let mut scale = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * d);
        for row in t.data().chunks(d.max(1)).take(r) {
            let s = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            scale.push(s);
            out.extend(row.iter().map(|v| v / s));
        }
        let out = Tensor::new(vec![r, d], out)?;
        Ok(self.push(out, Op::NormalizeRows { x: x.0, scale }, &[x.0]))
    }

    /// `a · bᵀ` for `a: [n × d]`, `b: [m × d]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = dims2(ta, "matmul_nt.lhs")?;
        let (m, d2) = dims2(tb, "matmul_nt.rhs")?;
        if d != d2 {
            return Err(Error::structural("matmul_nt", format!("inner dims {} vs {}", d, d2)));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MatMulNt(a.0, b.0), &[a.0, b.0]))
    }

    /// `[n, c, h, w]` → `[n·h·w, c]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        dims4(self.value(x), "nchw_to_rows")?;
        let out = self.value(x).nchw_to_rows();
        Ok(self.push(out, Op::NchwToRows(x.0), &[x.0]))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, _) = dims2(t, "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::structural("select_rows", format!("row {} of {}", bad, r)));
        }
        let out = t.select_leading(idx);
        Ok(self.push(
            out,
            Op::SelectRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Nearest-neighbour upsampling of `[n, c, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = dims4(t, "upsample_nearest")?;
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[plane * ho * wo + y * wo + xx] =
                        t.data()[plane * h * w + (y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(out, Op::Upsample { x: x.0, factor }, &[x.0]))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::structural(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                }
            }
            Op::MulConst(a, c) => {
                let d = gd.iter().zip(c.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(c.shape().to_vec(), d).unwrap());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Square(a) => {
                let va = &self.nodes[*a].value;
                let d = gd.iter().zip(va.data()).map(|(x, y)| 2.0 * x * y).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), d).unwrap());
            }
            Op::LnEps(a, eps) => {
                let va = &self.nodes[*a].value;
                let d = gd.iter().zip(va.data()).map(|(x, y)| x / (y + eps)).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let d = gd
                    .iter()
                    .zip(va.data())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => {
                let va = &self.nodes[*a].value;
                self.accumulate(grads, *a, Tensor::full(va.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let va = &self.nodes[*a].value;
                let s = gd[0] / va.numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(va.shape(), s));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape).unwrap());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(g, *x, *w, *b, *stride, *pad, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let tx = &self.nodes[*x].value;
                let (n, c, h, w) = dims4(tx, "").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gamma_v = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            dgamma[ch] += gd[base + p] * xhat[base + p];
                            dbeta[ch] += gd[base + p];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; tx.numel()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            for p in 0..hw {
                                let dxh = gd[base + p] * gamma_v[ch];
                                dx[base + p] = if *train {
                                    // dbeta/dgamma are Σ dy and Σ dy·x̂ per channel.
                                    inv_std[ch] / m
                                        * (m * dxh
                                            - gamma_v[ch] * dbeta[ch]
                                            - xhat[base + p] * gamma_v[ch] * dgamma[ch])
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let va = &self.nodes[*a].value;
                let (_, _, h, w) = dims4(va, "").unwrap();
                let hw = h * w;
                let mut d = vec![0.0; va.numel()];
                for (plane, &gv) in gd.iter().enumerate() {
                    d[plane * hw..(plane + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v = gv / hw as f64);
                }
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let o = tw.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..o {
                            let gv = gd[i * o + j];
                            for k in 0..d {
                                dx[i * d + k] += gv * tw.data()[j * d + k];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * d];
                    for i in 0..n {
                        for j in 0..o {
                            let gv = gd[i * o + j];
                            for k in 0..d {
                                dw[j * d + k] += gv * tx.data()[i * d + k];
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![o, d], dw).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for j in 0..o {
                            db[j] += gd[i * o + j];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db).unwrap());
                }
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let row = node.value.row_len();
                let mut offset = 0;
                for &p in parts {
                    let tp = &self.nodes[p].value;
                    let pr = tp.row_len();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(tp.numel());
                        for bi in 0..n {
                            d.extend_from_slice(&gd[bi * row + offset..bi * row + offset + pr]);
                        }
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), d).unwrap());
                    }
                    offset += pr;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let k = y.shape()[1];
                let mut d = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(k).zip(gd.chunks(k)).zip(d.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::CrossEntropy {
                logits,
                labels,
                count,
            } => {
                let t = &self.nodes[*logits].value;
                let k = t.shape()[1];
                let scale = gd[0] / *count as f64;
                let mut d = vec![0.0; t.numel()];
                for ((row, dr), label) in t.data().chunks(k).zip(d.chunks_mut(k)).zip(labels) {
                    let Some(y) = *label else { continue };
                    softmax_row(row, dr);
                    dr[y] -= 1.0;
                    dr.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = 2.0 * gd[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                            da[i * d + k] += gv * diff;
                            db[j * d + k] -= gv * diff;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![m, d], db).unwrap());
            }
            Op::NormalizeRows { x, scale } => {
                let y = &node.value;
                let d = y.shape()[1];
                let mut dx = vec![0.0; y.numel()];
                for (r, s) in scale.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gr[k] - dot * yr[k]) / s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        for k in 0..d {
                            da[i * d + k] += gv * tb.data()[j * d + k];
                            db[j * d + k] += gv * ta.data()[i * d + k];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![m, d], db).unwrap());
            }
            Op::NchwToRows(a) => {
                let ta = &self.nodes[*a].value;
                let (n, c, h, w) = dims4(ta, "").unwrap();
                let hw = h * w;
                let mut d = vec![0.0; ta.numel()];
                for bi in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[(bi * c + ch) * hw + p] = gd[(bi * hw + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
            }
            Op::SelectRows { x, idx } => {
                let tx = &self.nodes[*x].value;
                let c = tx.shape()[1];
                let mut d = vec![0.0; tx.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d).unwrap());
            }
            Op::Upsample { x, factor } => {
                let tx = &self.nodes[*x].value;
                let (n, c, h, w) = dims4(tx, "").unwrap();
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![0.0; tx.numel()];
                for plane in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[plane * h * w + (y / factor) * w + xx / factor] +=
                                gd[plane * ho * wo + y * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let tx = &self.nodes[x].value;
        let tw = &self.nodes[w].value;
        let (n, c, h, wd) = dims4(tx, "").unwrap();
        let (o, _, kh, kw) = dims4(tw, "").unwrap();
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let gd = g.data();
        let xd = tx.data();
        let wdat = tw.data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wdat.len()] } else { Vec::new() };
        if want_x || want_w {
            for bi in 0..n {
                for oc in 0..o {
                    let gplane = &gd[(bi * o + oc) * ho * wo..(bi * o + oc + 1) * ho * wo];
                    for ic in 0..c {
                        let xoff = (bi * c + ic) * h * wd;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((oc * c + ic) * kh + ky) * kw + kx;
                                let wv = wdat[widx];
                                let mut acc = 0.0;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let rbase = xoff + iy as usize * wd;
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let gv = gplane[oy * wo + ox];
                                        let xi = rbase + ix as usize;
                                        if want_x {
                                            dx[xi] += gv * wv;
                                        }
                                        acc += gv * xd[xi];
                                    }
                                }
                                if want_w {
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
        }
        if let Some(bi) = b {
            if self.wants(bi) {
                let mut db = vec![0.0; o];
                for nb in 0..n {
                    for oc in 0..o {
                        db[oc] += gd[(nb * o + oc) * ho * wo..(nb * o + oc + 1) * ho * wo]
                            .iter()
                            .sum::<f64>();
                    }
                }
                self.accumulate(grads, bi, Tensor::new(vec![o], db).unwrap());
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Compares the tape gradient of `f` w.r.t. its single input against central differences.
    fn check(input: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let y = f(&mut tape, x);
        let g = tape.backward(y).unwrap().get_or_zeros(x, &input);
        let h = 1e-6;
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut tp = Tape::new();
                let v = tp.leaf(t, true);
                let out = f(&mut tp, v);
                tp.value(out).item()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                "element {}: finite difference {} vs analytic {}",
                i,
                fd,
                an
            );
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let probe = random(&[2, 3, 2, 2], &mut rng);
        check(random(&[2, 2, 4, 4], &mut rng), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(x, wv, Some(bv), 2, 1).unwrap();
            let y = t.mul_const(y, probe.clone()).unwrap();
            t.sum(y)
        });
        let x = random(&[2, 2, 4, 4], &mut rng);
        let probe = random(&[2, 3, 2, 2], &mut rng);
        check(w.clone(), |t, wv| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, wv, None, 2, 1).unwrap();
            let y = t.mul_const(y, probe.clone()).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn batch_norm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probe = random(&[3, 2, 2, 2], &mut rng);
        check(random(&[3, 2, 2, 2], &mut rng), |t, x| {
            let g = t.constant(Tensor::new(vec![2], vec![1.3, 0.7]).unwrap());
            let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
            let (y, _) = t.batch_norm(x, g, b, 1e-5, None).unwrap();
            let y = t.mul_const(y, probe.clone()).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn matrix_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = random(&[4, 3], &mut rng);
        check(random(&[3, 3], &mut rng), |t, x| {
            let o = t.constant(other.clone());
            let d = t.pairwise_sq_dist(x, o).unwrap();
            let e = t.scale(d, -0.5);
            let e = t.exp(e);
            let dd = t.pairwise_sq_dist(x, x).unwrap();
            let s = t.sum(dd);
            let m = t.mean(e);
            let s = t.scale(s, 0.01);
            t.add(m, s).unwrap()
        });
        check(random(&[3, 4], &mut rng), |t, x| {
            let n = t.normalize_rows(x, 1e-12).unwrap();
            let g = t.matmul_nt(n, n).unwrap();
            let g = t.square(g);
            t.mean(g)
        });
        check(random(&[5, 3], &mut rng), |t, x| {
            t.cross_entropy(x, &[Some(0), Some(2), None, Some(1), Some(1)]).unwrap()
        });
        check(random(&[2, 3], &mut rng), |t, x| {
            let p = t.softmax_rows(x).unwrap();
            let l = t.ln_eps(p, 1e-12);
            let w = t.mul_const(l, Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]])).unwrap();
            t.sum(w)
        });
    }

    #[test]
    fn layout_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = random(&[8, 2], &mut rng);
        check(random(&[2, 2, 2, 2], &mut rng), |t, x| {
            let r = t.nchw_to_rows(x).unwrap();
            let r = t.select_rows(r, &[0, 3, 3, 7, 1, 2, 5, 6]).unwrap();
            let r = t.mul_const(r, probe.clone()).unwrap();
            t.sum(r)
        });
        let probe = random(&[1, 4, 4, 4], &mut rng);
        check(random(&[1, 2, 2, 2], &mut rng), |t, x| {
            let u = t.upsample_nearest(x, 2).unwrap();
            let c = t.concat(&[u, u]).unwrap();
            let c = t.mul_const(c, probe.clone()).unwrap();
            t.sum(c)
        });
        let w = random(&[3, 2], &mut rng);
        check(random(&[2, 2, 2, 2], &mut rng), |t, x| {
            let p = t.global_avg_pool(x).unwrap();
            let wv = t.constant(w.clone());
            let bv = t.constant(Tensor::zeros(&[3]));
            let y = t.linear(p, wv, bv).unwrap();
            let y = t.relu(y);
            let y = t.square(y);
            t.sum(y)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x);
        let yd = tape.detach(y);
        let z = tape.mul(yd, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 9.0);
        assert!(g.get(yd).is_none());
    }

    #[test]
    fn shape_mismatch_names_edge() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        match tape.add(a, b) {
            Err(Error::Structural { edge, .. }) => assert_eq!(edge, "add"),
            other => panic!("unexpected {:?}", other),
        }
    }
}
