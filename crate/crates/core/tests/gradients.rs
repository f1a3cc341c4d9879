//! Analytic gradients against central finite differences.

mod common;

use common::*;
use osmd_core::autograd::{Tape, Var};
use osmd_core::baselines::{feature_hint_loss, relation_kd_loss, response_kd_loss};
use osmd_core::ctn::ctn_loss;
use osmd_core::jdn::{jdn_loss, JdnConfig, KernelConfig};
use osmd_core::model::{TransformBlock, TransformId};
use osmd_core::nn::{Mode, ParamStore, Session};
use osmd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Gradient of a scalar built from one differentiable input, checked coordinate-wise.
fn check(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, v);
    let g = tape.backward(loss).unwrap();
    let analytic = g.get_or_zeros(v, x);
    let numeric = numeric_grad(x, H, |probe| {
        let mut t = Tape::new();
        let c = t.constant(probe.clone());
        let l = build(&mut t, c);
        t.value(l).item()
    });
    relative_error(analytic.data(), &numeric)
}

fn rng(tag: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tag * 1000 + i)
}

fn jdn_cfg(sigma: f64, temperature: f64) -> JdnConfig {
    JdnConfig {
        kernel: KernelConfig::fixed(sigma),
        temperature,
        ..JdnConfig::default()
    }
}

#[test]
fn jdn_gradient_wrt_shared_representation() {
    for i in 0..INSTANCES {
        let mut r = rng(1, i);
        let b = r.gen_range(2..=4);
        let rep_s = randn(&mut r, &[b, 2, 2, 2]);
        let rep_p = randn(&mut r, &[b, 2, 2, 2]);
        let (ls, lp) = (randn(&mut r, &[b, 3]), randn(&mut r, &[b, 3]));
        let cfg = jdn_cfg(r.gen_range(2.0..20.0), 1.0);
        let err = check(&rep_s, |t, v| {
            let (p, a, c) = (t.constant(rep_p.clone()), t.constant(ls.clone()), t.constant(lp.clone()));
            jdn_loss(t, v, p, a, c, &cfg, 0).unwrap().loss
        });
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}

#[test]
fn jdn_gradient_wrt_shared_logits() {
    for i in 0..INSTANCES {
        let mut r = rng(2, i);
        let b = r.gen_range(1..=4);
        let n = r.gen_range(2..=4);
        let rep_s = randn(&mut r, &[b, 5]);
        let rep_p = randn(&mut r, &[b, 5]);
        let (ls, lp) = (randn(&mut r, &[b, n]), randn(&mut r, &[b, n]));
        let cfg = jdn_cfg(4.0, r.gen_range(1.0..4.0));
        let err = check(&ls, |t, v| {
            let (a, p, c) = (t.constant(rep_s.clone()), t.constant(rep_p.clone()), t.constant(lp.clone()));
            jdn_loss(t, a, p, v, c, &cfg, 0).unwrap().loss
        });
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}

fn transforms(r: &mut ChaCha8Rng, c: usize) -> (ParamStore, TransformBlock, TransformBlock) {
    let mut store = ParamStore::new();
    let t1 = TransformBlock::new("t1", TransformId::T1, c);
    let t2 = TransformBlock::new("t2", TransformId::T2, c);
    t1.init(&mut store, r);
    t2.init(&mut store, r);
    (store, t1, t2)
}

fn ctn_value(store: &ParamStore, t1: &TransformBlock, t2: &TransformBlock, rs: &Tensor, ro: &Tensor) -> f64 {
    let mut s = Session::new(store);
    let (a, b) = (s.input(rs.clone()), s.input(ro.clone()));
    let out = ctn_loss(&mut s, a, b, t1, t2, Mode::Train).unwrap();
    s.value(out.loss).item()
}

#[test]
fn ctn_gradient_wrt_transform_parameters() {
    for i in 0..INSTANCES {
        let mut r = rng(3, i);
        let b = r.gen_range(2..=3);
        let rs = randn(&mut r, &[b, 2, 3, 3]);
        let ro = randn(&mut r, &[b, 2, 3, 3]);
        let (store, t1, t2) = transforms(&mut r, 2);
        let mut s = Session::new(&store);
        let (a, o) = (s.input(rs.clone()), s.input(ro.clone()));
        let out = ctn_loss(&mut s, a, o, &t1, &t2, Mode::Train).unwrap();
        let grads = s.grads(out.loss).unwrap();
        assert!(!grads.is_empty());
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (name, g) in &grads {
            analytic.extend_from_slice(g.data());
            let base = store.get(name).unwrap().clone();
            numeric.extend(numeric_grad(&base, H, |probe| {
                let mut st = store.clone();
                *st.get_mut(name).unwrap() = probe.clone();
                ctn_value(&st, &t1, &t2, &rs, &ro)
            }));
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}

#[test]
fn ctn_gradient_wrt_shared_representation() {
    for i in 0..INSTANCES {
        let mut r = rng(4, i);
        let b = r.gen_range(2..=3);
        let rs = randn(&mut r, &[b, 2, 3, 3]);
        let ro = randn(&mut r, &[b, 2, 3, 3]);
        let (store, t1, t2) = transforms(&mut r, 2);
        let mut s = Session::new(&store);
        let a = s.tape.leaf(rs.clone(), true);
        let o = s.input(ro.clone());
        let out = ctn_loss(&mut s, a, o, &t1, &t2, Mode::Train).unwrap();
        let g = s.tape.backward(out.loss).unwrap();
        let numeric = numeric_grad(&rs, H, |probe| ctn_value(&store, &t1, &t2, probe, &ro));
        let err = relative_error(g.get_or_zeros(a, &rs).data(), &numeric);
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}

#[test]
fn response_kd_gradient() {
    for i in 0..INSTANCES {
        let mut r = rng(5, i);
        let (b, n) = (r.gen_range(1..=4), r.gen_range(2..=5));
        let (ls, lp) = (randn(&mut r, &[b, n]), randn(&mut r, &[b, n]));
        let temperature = r.gen_range(1.0..5.0);
        let err = check(&ls, |t, v| {
            let p = t.constant(lp.clone());
            response_kd_loss(t, p, v, temperature).unwrap()
        });
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}

#[test]
fn feature_hint_gradient() {
    for i in 0..INSTANCES {
        let mut r = rng(6, i);
        let b = r.gen_range(1..=3);
        let (rs, rp) = (randn(&mut r, &[b, 2, 2, 2]), randn(&mut r, &[b, 2, 2, 2]));
        let err = check(&rs, |t, v| {
            let p = t.constant(rp.clone());
            feature_hint_loss(t, v, p).unwrap()
        });
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}

#[test]
fn relation_kd_gradient() {
    for i in 0..INSTANCES {
        let mut r = rng(7, i);
        let b = r.gen_range(2..=4);
        let (rs, rp) = (randn(&mut r, &[b, 2, 2, 2]), randn(&mut r, &[b, 2, 2, 2]));
        let err = check(&rs, |t, v| {
            let p = t.constant(rp.clone());
            relation_kd_loss(t, v, p).unwrap()
        });
        assert!(err <= TOL, "instance {}: relative error {}", i, err);
    }
}
