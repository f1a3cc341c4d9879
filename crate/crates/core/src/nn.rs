//! Parameter storage and the small set of layers the models are built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameters and buffers (batch-norm running statistics), kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::structural(name, "parameter not initialized"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::structural(name, "parameter not initialized"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn extract_prefix(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { entries }
    }

    /// Copies every entry of `other` into this store under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{}{}", prefix, k), v.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian values of entries matching `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient tensors keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

pub fn grad_norm(grads: &GradMap, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, g)| g.sq_norm())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the parameters bound into it.
///
/// Buffer updates (running statistics) are collected instead of written, so a
/// forward pass never mutates the store it reads from.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds a named parameter as a differentiable leaf (once per session).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Queues a buffer write; a later write to the same name replaces the earlier one.
    pub fn queue_buffer(&mut self, name: String, value: Tensor) {
        match self.buffer_updates.iter_mut().find(|(k, _)| *k == name) {
            Some(slot) => slot.1 = value,
            None => self.buffer_updates.push((name, value)),
        }
    }

    /// A buffer as it will be after the queued updates: pending value, else the stored one.
    pub fn pending_buffer(&self, name: &str) -> Result<&Tensor> {
        match self.buffer_updates.iter().find(|(k, _)| k == name) {
            Some((_, v)) => Ok(v),
            None => self.store.get(name),
        }
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradient of `loss` w.r.t. every bound parameter it reaches.
    pub fn grads(&self, loss: Var) -> Result<GradMap> {
        let g: Gradients = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(k, v)| g.get(*v).map(|t| (k.clone(), t.clone())))
            .collect())
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(String, Tensor)>) {
    for (k, v) in updates {
        store.insert(k, v);
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("consistent shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        store.insert(
            self.weight_name(),
            he_normal(&[self.out_channels, self.in_channels, self.kernel, self.kernel], fan_in, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight_name())?;
        let b = s.param(&self.bias_name())?;
        s.tape
            .conv2d(x, w, Some(b), self.stride, self.pad)
            .map_err(|e| relabel(e, &self.name))
    }
}

fn relabel(e: Error, edge: &str) -> Error {
    match e {
        Error::Structural { detail, edge: inner } => {
            Error::structural(edge, format!("{} ({})", detail, inner))
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn key(&self, what: &str) -> String {
        format!("{}.{}", self.name, what)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.key("gamma"), Tensor::full(&[self.channels], 1.0));
        store.insert(self.key("beta"), Tensor::zeros(&[self.channels]));
        store.insert(self.key("running_mean"), Tensor::zeros(&[self.channels]));
        store.insert(self.key("running_var"), Tensor::full(&[self.channels], 1.0));
    }

    pub fn forward(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        let gamma = s.param(&self.key("gamma"))?;
        let beta = s.param(&self.key("beta"))?;
        match mode {
            Mode::Train => {
                let (y, stats) = s
                    .tape
                    .batch_norm(x, gamma, beta, self.eps, None)
                    .map_err(|e| relabel(e, &self.name))?;
                let stats = stats.expect("training mode returns batch statistics");
                // A block applied twice in one pass (shared transforms) folds in both batches.
                let rm = s.pending_buffer(&self.key("running_mean"))?.data().to_vec();
                let rv = s.pending_buffer(&self.key("running_var"))?.data().to_vec();
                let m = self.momentum;
                let new_mean: Vec<f64> =
                    rm.iter().zip(&stats.mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_var: Vec<f64> =
                    rv.iter().zip(&stats.var).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                s.queue_buffer(self.key("running_mean"), Tensor::new(vec![self.channels], new_mean)?);
                s.queue_buffer(self.key("running_var"), Tensor::new(vec![self.channels], new_var)?);
                Ok(y)
            }
            Mode::Eval => {
                let rm = s.store().get(&self.key("running_mean"))?.data().to_vec();
                let rv = s.store().get(&self.key("running_var"))?.data().to_vec();
                let (y, _) = s
                    .tape
                    .batch_norm(x, gamma, beta, self.eps, Some((&rm, &rv)))
                    .map_err(|e| relabel(e, &self.name))?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Linear {
            name: name.into(),
            in_features: cin,
            out_features: cout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            format!("{}.weight", self.name),
            he_normal(&[self.out_features, self.in_features], self.in_features, rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_features]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&format!("{}.weight", self.name))?;
        let b = s.param(&format!("{}.bias", self.name))?;
        s.tape.linear(x, w, b).map_err(|e| relabel(e, &self.name))
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(format!("{}.conv", name), cin, cout, kernel, stride),
            bn: BatchNorm2d::new(format!("{}.bn", name), cout),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward(&self, s: &mut Session, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y, mode)?;
        Ok(s.tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_forward_queues_no_buffer_updates() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConvBnRelu::new("b", 2, 3, 3, 1);
        block.init(&mut store, &mut rng);
        let x = Tensor::full(&[2, 2, 4, 4], 0.5);

        let mut s = Session::new(&store);
        let xv = s.input(x.clone());
        block.forward(&mut s, xv, Mode::Eval).unwrap();
        assert!(s.take_buffer_updates().is_empty());

        let mut s = Session::new(&store);
        let xv = s.input(x);
        block.forward(&mut s, xv, Mode::Train).unwrap();
        assert_eq!(s.take_buffer_updates().len(), 2);
    }

    #[test]
    fn prefix_round_trip_preserves_checksum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Linear::new("enc.fc", 3, 2).init(&mut store, &mut rng);
        let sub = store.extract_prefix("enc.");
        let mut again = ParamStore::new();
        again.merge_prefixed("enc.", &sub);
        assert_eq!(store.checksum(""), again.checksum(""));
        assert_ne!(store.checksum("enc."), ParamStore::new().checksum(""));
    }
}
