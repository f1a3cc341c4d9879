//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `cargo test --test acceptance -- 1 4 9` runs a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use osmd_core::autograd::{Tape, Var};
use osmd_core::balance::{total_loss, update_weights, GradNorms, LossWeights, RawLosses, ETA};
use osmd_core::baselines::{
    autoencoder_translation_loss, build_variant, feature_hint_loss, relation_kd_loss, response_kd_loss, Variant,
    VariantSpec,
};
use osmd_core::config::ExperimentConfig;
use osmd_core::ctn::ctn_loss;
use osmd_core::data::make_batches;
use osmd_core::experiment::{
    build_graph, effective_config, ensure_pretrained, prepare_data, run_ablation, run_experiment, RunOptions, RunStatus,
    METRICS_LOG, RESULTS,
};
use osmd_core::jdn::{conditional_kl_value, gaussian_kernel, jdn_loss, mmd_value, JdnConfig, KernelConfig};
use osmd_core::metrics::{compute_acer, compute_miou};
use osmd_core::model::{prefixes, Identity, TransformBlock, TransformId};
use osmd_core::nn::{Mode, ParamStore, Session};
use osmd_core::optim::Sgd;
use osmd_core::train::{derive_seed, train_step, StepContext, TrainState};
use osmd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {:.1?}, limit {:?}", elapsed, limit))
}

fn default_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    ExperimentConfig::load(&path).expect("configs/default.toml loads")
}

fn rng(tag: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xacce_0000 + tag * 10_000 + i)
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut worst_mmd = 0.0f64;
    for i in 0..100 {
        let mut r = rng(1, i);
        let (b, d) = (r.gen_range(1..=5), r.gen_range(1..=8));
        let (a, p) = (randn(&mut r, &[b, d]), randn(&mut r, &[b, d]));
        let fixed = r.gen_range(0.1..10.0);
        for (k, sigma) in [
            (KernelConfig::default(), naive_median_bandwidth(&rows(&a), &rows(&p))),
            (KernelConfig::fixed(fixed), fixed),
        ] {
            let got = mmd_value(&a, &p, &k).map_err(|e| e.to_string())?;
            worst_mmd = worst_mmd.max((got - naive_mmd(&rows(&a), &rows(&p), sigma)).abs());
        }
    }
    ensure(worst_mmd <= 1e-9, || format!("mmd deviates by {:e}", worst_mmd))?;
    let mut worst_kl = 0.0f64;
    for i in 0..100 {
        let mut r = rng(2, i);
        let (m, n) = (r.gen_range(1..=6), r.gen_range(2..=6));
        let (lp, ls) = (randn(&mut r, &[m, n]), randn(&mut r, &[m, n]));
        let got = conditional_kl_value(&lp, &ls).map_err(|e| e.to_string())?;
        worst_kl = worst_kl.max((got - naive_kl(&rows(&lp), &rows(&ls))).abs());
    }
    ensure(worst_kl <= 1e-9, || format!("kl deviates by {:e}", worst_kl))?;
    let mmd1 = mmd_value(&Tensor::from_rows(&[vec![0.0]]), &Tensor::from_rows(&[vec![2.0]]), &KernelConfig::fixed(1.0))
        .map_err(|e| e.to_string())?;
    ensure((mmd1 - 1.963369).abs() <= 1e-5, || format!("b=1 mmd {}", mmd1))?;
    let half = (2.0f64).ln();
    let kl1 = conditional_kl_value(&Tensor::from_rows(&[vec![half, 0.0]]), &Tensor::from_rows(&[vec![0.0, 0.0]]))
        .map_err(|e| e.to_string())?;
    ensure((kl1 - 0.056633).abs() <= 1e-5, || format!("m=1 kl {}", kl1))?;
    within(t0.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "max |mmd - naive| {:.1e}, max |kl - naive| {:.1e}, mmd(b=1) {:.6}, kl(m=1) {:.6}",
        worst_mmd, worst_kl, mmd1, kl1
    ))
}

const FD_H: f64 = 1e-6;

fn fd_check(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, v);
    let analytic = tape.backward(loss).unwrap().get_or_zeros(v, x);
    let numeric = numeric_grad(x, FD_H, |probe| {
        let mut t = Tape::new();
        let c = t.constant(probe.clone());
        let l = build(&mut t, c);
        t.value(l).item()
    });
    relative_error(analytic.data(), &numeric)
}

fn ctn_fd(r: &mut ChaCha8Rng) -> f64 {
    let b = r.gen_range(2..=3);
    let (rs, ro) = (randn(r, &[b, 2, 3, 3]), randn(r, &[b, 2, 3, 3]));
    let mut store = ParamStore::new();
    let t1 = TransformBlock::new("t1", TransformId::T1, 2);
    let t2 = TransformBlock::new("t2", TransformId::T2, 2);
    t1.init(&mut store, r);
    t2.init(&mut store, r);
    let value = |st: &ParamStore, x: &Tensor| {
        let mut s = Session::new(st);
        let (a, o) = (s.input(x.clone()), s.input(ro.clone()));
        let out = ctn_loss(&mut s, a, o, &t1, &t2, Mode::Train).unwrap();
        s.value(out.loss).item()
    };
    let mut s = Session::new(&store);
    let a = s.tape.leaf(rs.clone(), true);
    let o = s.input(ro.clone());
    let out = ctn_loss(&mut s, a, o, &t1, &t2, Mode::Train).unwrap();
    let grads = s.grads(out.loss).unwrap();
    let mut analytic = s.tape.backward(out.loss).unwrap().get_or_zeros(a, &rs).data().to_vec();
    let mut numeric = numeric_grad(&rs, FD_H, |p| value(&store, p));
    for (name, g) in &grads {
        analytic.extend_from_slice(g.data());
        numeric.extend(numeric_grad(store.get(name).unwrap(), FD_H, |p| {
            let mut st = store.clone();
            *st.get_mut(name).unwrap() = p.clone();
            value(&st, &rs)
        }));
    }
    relative_error(&analytic, &numeric)
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut report = Vec::new();
    let checks: [(&str, &dyn Fn(&mut ChaCha8Rng) -> f64); 5] = [
        ("jdn", &|r| {
            let b = r.gen_range(2..=4);
            let (rs, rp) = (randn(r, &[b, 2, 2, 2]), randn(r, &[b, 2, 2, 2]));
            let (ls, lp) = (randn(r, &[b, 3]), randn(r, &[b, 3]));
            let cfg = JdnConfig {
                kernel: KernelConfig::fixed(r.gen_range(2.0..20.0)),
                temperature: r.gen_range(1.0..3.0),
                ..JdnConfig::default()
            };
            let e1 = fd_check(&rs, |t, v| {
                let (p, a, c) = (t.constant(rp.clone()), t.constant(ls.clone()), t.constant(lp.clone()));
                jdn_loss(t, v, p, a, c, &cfg, 0).unwrap().loss
            });
            let e2 = fd_check(&ls, |t, v| {
                let (a, p, c) = (t.constant(rs.clone()), t.constant(rp.clone()), t.constant(lp.clone()));
                jdn_loss(t, a, p, v, c, &cfg, 0).unwrap().loss
            });
            e1.max(e2)
        }),
        ("ctn", &ctn_fd),
        ("response", &|r| {
            let (b, n) = (r.gen_range(1..=4), r.gen_range(2..=5));
            let (ls, lp) = (randn(r, &[b, n]), randn(r, &[b, n]));
            let temp = r.gen_range(1.0..5.0);
            fd_check(&ls, |t, v| {
                let p = t.constant(lp.clone());
                response_kd_loss(t, p, v, temp).unwrap()
            })
        }),
        ("feature", &|r| {
            let b = r.gen_range(1..=3);
            let (rs, rp) = (randn(r, &[b, 2, 2, 2]), randn(r, &[b, 2, 2, 2]));
            fd_check(&rs, |t, v| {
                let p = t.constant(rp.clone());
                feature_hint_loss(t, v, p).unwrap()
            })
        }),
        ("relation", &|r| {
            let b = r.gen_range(2..=4);
            let (rs, rp) = (randn(r, &[b, 2, 2, 2]), randn(r, &[b, 2, 2, 2]));
            fd_check(&rs, |t, v| {
                let p = t.constant(rp.clone());
                relation_kd_loss(t, v, p).unwrap()
            })
        }),
    ];
    for (k, (name, f)) in checks.iter().enumerate() {
        let worst = (0..20).map(|i| f(&mut rng(20 + k as u64, i))).fold(0.0f64, f64::max);
        ensure(worst <= 1e-4, || format!("{} relative error {:e}", name, worst))?;
        report.push(format!("{} {:.1e}", name, worst));
    }
    within(t0.elapsed(), Duration::from_secs(60))?;
    Ok(format!("max relative error: {}", report.join(", ")))
}

fn criterion_3() -> Verdict {
    let tol = 1e-7;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut r = rng(3, i);
        let b = r.gen_range(2..=4);
        let rep = randn(&mut r, &[b, 2, 3, 3]);
        let logits = randn(&mut r, &[b, 3]);
        let k = if i % 2 == 0 { KernelConfig::default() } else { KernelConfig::fixed(r.gen_range(0.5..5.0)) };
        let flat = Tensor::new(vec![b, rep.row_len()], rep.data().to_vec()).unwrap();
        worst = worst.max(mmd_value(&flat, &flat, &k).unwrap());
        worst = worst.max(conditional_kl_value(&logits, &logits).unwrap().abs());
        let mut tape = Tape::new();
        let (a, p, ls, lp) = (
            tape.constant(rep.clone()),
            tape.constant(rep.clone()),
            tape.constant(logits.clone()),
            tape.constant(logits.clone()),
        );
        let jdn = jdn_loss(&mut tape, a, p, ls, lp, &JdnConfig { kernel: k, ..Default::default() }, 0).unwrap();
        worst = worst.max(jdn.terms.l_jdn.abs());
        for v in [
            response_kd_loss(&mut tape, lp, ls, 2.0).unwrap(),
            feature_hint_loss(&mut tape, a, p).unwrap(),
            relation_kd_loss(&mut tape, a, p).unwrap(),
        ] {
            worst = worst.max(tape.value(v).item().abs());
        }
        let mut store = ParamStore::new();
        let (t1, t2) = (TransformBlock::new("t1", TransformId::T1, 2), TransformBlock::new("t2", TransformId::T2, 2));
        t1.init(&mut store, &mut r);
        t2.init(&mut store, &mut r);
        let mut s = Session::new(&store);
        let (x, y) = (s.input(rep.clone()), s.input(rep.clone()));
        worst = worst.max(ctn_loss(&mut s, x, y, &t1, &t2, Mode::Train).unwrap().terms.l_ctn.abs());
        worst = worst.max(ctn_loss(&mut s, x, y, &Identity, &Identity, Mode::Eval).unwrap().terms.l_ctn.abs());
        let ae = autoencoder_translation_loss(&mut s, x, y, &Identity, Mode::Eval).unwrap();
        worst = worst.max(s.value(ae).item().abs());
    }
    ensure(worst <= tol, || format!("identical-input loss {:e}", worst))?;

    let mut r = rng(3, 999);
    for _ in 0..100 {
        let d = r.gen_range(1..=8);
        let u: Vec<f64> = (0..d).map(|_| r.gen_range(-5.0..5.0)).collect();
        let k = gaussian_kernel(&u, &u, r.gen_range(1e-3..1e3)).unwrap();
        ensure(k == 1.0, || format!("k(u,u) = {}", k))?;
    }

    let mut w = LossWeights::new(0.1, 0.9).unwrap();
    for _ in 0..1000 {
        let raw = RawLosses {
            l_jdn: r.gen_range(0.0..20.0),
            l_ctn: r.gen_range(0.0..5.0),
            l_ttl: r.gen_range(0.0..3.0),
        };
        let norms = GradNorms {
            g_jdn: r.gen_range(0.0..10.0),
            g_ctn: r.gen_range(0.0..10.0),
            g_ttl: r.gen_range(0.0..10.0),
        };
        w = update_weights(raw, norms, &w).unwrap();
        ensure(w.eta() == ETA && ETA == 1.0, || format!("eta {}", w.eta()))?;
        ensure(w.alpha >= 0.0 && w.beta >= 0.0, || format!("negative weights {} {}", w.alpha, w.beta))?;
        let rep = total_loss(raw, &w).unwrap();
        let expect = w.alpha * raw.l_jdn + w.beta * raw.l_ctn + raw.l_ttl;
        ensure((rep.l_total - expect).abs() <= 1e-12, || format!("l_total off by {:e}", rep.l_total - expect))?;
        ensure(rep.eta == 1.0, || "reported eta differs from 1".into())?;
    }
    Ok(format!("max identical-input loss {:.1e}; k(u,u)=1; eta=1 over 1000 updates; total identity exact", worst))
}

fn criterion_4() -> Verdict {
    let mut r = rng(4, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let raw = RawLosses {
            l_jdn: r.gen_range(1e-3..50.0),
            l_ctn: r.gen_range(1e-3..50.0),
            l_ttl: r.gen_range(1e-3..10.0),
        };
        let g = r.gen_range(1e-3..10.0);
        let w = update_weights(raw, GradNorms { g_jdn: g, g_ctn: g, g_ttl: g }, &LossWeights::new(0.1, 0.0).unwrap())
            .unwrap();
        let target = 0.1 * raw.l_ttl;
        worst = worst
            .max((w.alpha * raw.l_jdn - target).abs())
            .max((w.beta * raw.l_ctn - target).abs());
    }
    ensure(worst <= 1e-9, || format!("magnitude constraint off by {:e}", worst))?;
    let ex = update_weights(
        RawLosses { l_jdn: 5.0, l_ctn: 0.5, l_ttl: 1.0 },
        GradNorms { g_jdn: 1.0, g_ctn: 1.0, g_ttl: 1.0 },
        &LossWeights::new(0.1, 0.0).unwrap(),
    )
    .unwrap();
    ensure(ex.alpha == 0.02 && ex.beta == 0.2, || format!("worked example gives ({}, {})", ex.alpha, ex.beta))?;
    Ok(format!("max deviation {:.1e}; (5, 0.5, 1) -> ({}, {})", worst, ex.alpha, ex.beta))
}

fn criterion_5() -> Verdict {
    let t0 = Instant::now();
    let cfg = effective_config(&default_config(), Some(Variant::Full), Some(0)).map_err(|e| e.to_string())?;
    let data = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let pre_dir = scratch("c5-pretrain");
    let pre = ensure_pretrained(&cfg, &data, 0, &pre_dir, false).map_err(|e| e.to_string())?;

    let recipe = build_variant(&VariantSpec::new(Variant::Full), cfg.model.fine_tune_ordinary).unwrap();
    let graph = build_graph(&cfg, &data, recipe.fusion_kind).unwrap();
    let mut store = graph.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(0, "init", 0)));
    store.merge_prefixed("", &pre.params);
    let frozen = [prefixes::PRIVILEGED, prefixes::HEAD_P];
    let before: Vec<String> = frozen.iter().map(|p| store.checksum(p)).collect();
    let jdn = cfg.losses.jdn();
    let mut state = TrainState::new(
        store,
        Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay).unwrap(),
        LossWeights::new(cfg.losses.target_ratio, cfg.losses.ema_decay).unwrap(),
    );
    let mut epoch = 0;
    'outer: loop {
        for batch in make_batches(&data.train, cfg.optimizer.batch_size(), epoch, false).unwrap() {
            if state.step == 200 {
                break 'outer;
            }
            let ctx = StepContext {
                graph: &graph,
                recipe: &recipe,
                phase: &recipe.phases[0],
                jdn: &jdn,
                lr: cfg.optimizer.lr(),
                seed: state.step,
                ignore_label: None,
            };
            train_step(&mut state, &batch.unwrap(), &ctx).map_err(|e| e.to_string())?;
        }
        epoch += 1;
    }
    let after: Vec<String> = frozen.iter().map(|p| state.store.checksum(p)).collect();
    ensure(before == after, || "privileged encoder or head changed during training".into())?;

    let mut r = rng(5, 0);
    let eval = &data.eval.samples[..8];
    let xo = Tensor::stack(&eval.iter().map(|s| &s.x_o).collect::<Vec<_>>()).unwrap();
    let xp = Tensor::stack(&eval.iter().map(|s| &s.x_p).collect::<Vec<_>>()).unwrap();
    let fused = |x_p: &Tensor| {
        let mut s = Session::new(&state.store);
        let out = graph.forward_training(&mut s, &xo, x_p, Mode::Eval).unwrap();
        s.value(out.fused_logits).clone()
    };
    let reference = fused(&xp);
    for _ in 0..5 {
        let noise = randn(&mut r, xp.shape());
        let scale = r.gen_range(0.1..1e3);
        let xp2 = Tensor::new(
            xp.shape().to_vec(),
            xp.data().iter().zip(noise.data()).map(|(a, b)| a + scale * b).collect(),
        )
        .unwrap();
        ensure(fused(&xp2) == reference, || "fused output depends on x_p".into())?;
    }
    ensure(
        graph.forward_inference(&state.store, &xo).unwrap().logits == reference,
        || "inference path differs from the fused training path".into(),
    )?;

    let root = scratch("c5-variants");
    let mut one = cfg.clone();
    one.run.epochs = 1;
    for v in Variant::ABLATION {
        let c = effective_config(&one, Some(v), Some(0)).map_err(|e| e.to_string())?;
        let out = run_experiment(
            &c,
            &RunOptions {
                out: Some(root.join(v.name())),
                pretrain_dir: Some(pre_dir.clone()),
                ..Default::default()
            },
        )
        .map_err(|e| format!("{}: {}", v, e))?;
        ensure(out.status == RunStatus::Completed, || format!("{}: {:?}", v, out.status))?;
    }
    within(t0.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "checksums stable over 200 steps; fused output x_p-invariant; {} variants ran one epoch ({:.0?})",
        Variant::ABLATION.len(),
        t0.elapsed()
    ))
}

struct Ablation {
    means: Vec<(Variant, f64, f64)>,
}

impl Ablation {
    fn get(&self, v: Variant) -> Result<(f64, f64), String> {
        self.means
            .iter()
            .find(|m| m.0 == v)
            .map(|m| (m.1, m.2))
            .ok_or_else(|| format!("no successful runs of {}", v))
    }

    fn table(&self) -> String {
        self.means
            .iter()
            .map(|(v, m, s)| format!("{} {:.4}±{:.4}", v, m, s))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn ablation() -> Result<Ablation, String> {
    let cfg = default_config();
    let seeds = cfg.run.seeds.clone();
    if seeds.len() != 5 {
        return Err(format!("default config lists {} seeds, expected 5", seeds.len()));
    }
    let out = scratch("ablation");
    let t0 = Instant::now();
    let table = run_ablation(&cfg, &Variant::ALL, &seeds, &out).map_err(|e| e.to_string())?;
    let per_seed = t0.elapsed() / seeds.len() as u32;
    if per_seed > Duration::from_secs(15 * 60) {
        return Err(format!("{:.0?} per seed exceeds the 15 min budget", per_seed));
    }
    let failed: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| format!("{}-seed{}: {}", r.variant, r.seed, r.status))
        .collect();
    if !failed.is_empty() {
        return Err(format!("failed runs: {}", failed.join("; ")));
    }
    let means = table
        .stats
        .iter()
        .map(|s| (s.variant, s.mean_error.unwrap_or(f64::NAN), s.std_error.unwrap_or(f64::NAN)))
        .collect();
    Ok(Ablation { means })
}

fn criterion_6(a: &Ablation) -> Verdict {
    let (full, s_full) = a.get(Variant::Full)?;
    let (ord, s_ord) = a.get(Variant::OrdinaryOnly)?;
    let (two, _) = a.get(Variant::TwoStage)?;
    let pooled = ((s_full * s_full + s_ord * s_ord) / 2.0).sqrt();
    let detail = format!(
        "full {:.4} vs ordinary_only {:.4} (margin {:.4}, pooled std {:.4}); two_stage {:.4}",
        full,
        ord,
        ord - full,
        pooled,
        two
    );
    ensure(ord - full > pooled, || format!("margin does not exceed pooled std: {}", detail))?;
    ensure(full < two, || format!("full does not beat two_stage: {}", detail))?;
    Ok(detail)
}

fn criterion_7(a: &Ablation) -> Verdict {
    let (full, _) = a.get(Variant::Full)?;
    let (mj, mc) = (a.get(Variant::MinusJdn)?.0, a.get(Variant::MinusCtn)?.0);
    let detail = format!("full {:.4}, minus_jdn {:.4}, minus_ctn {:.4}; {}", full, mj, mc, a.table());
    ensure(full <= mj, || format!("full > minus_jdn: {}", detail))?;
    ensure(full <= mc, || format!("full > minus_ctn: {}", detail))?;
    // substitutions (+fkd, +rkd, +ae) are not removals
    ensure(mj - full > mc - full, || format!("minus_ctn degrades more than minus_jdn: {}", detail))?;
    Ok(detail)
}

fn criterion_8() -> Verdict {
    let mut r = rng(8, 0);
    for i in 0..1000 {
        let m = r.gen_range(2..20);
        let mut labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..m).map(|_| r.gen_range(0..10) as f64 / 9.0).collect();
        let thr = r.gen_range(0..11) as f64 / 10.0;
        let got = compute_acer(&scores, &labels, thr).unwrap();
        let want = brute_acer(&scores, &labels, thr);
        ensure((got.apcer, got.bpcer, got.acer) == want, || format!("acer instance {}: {:?} vs {:?}", i, got, want))?;

        let n = r.gen_range(1..5);
        let len = r.gen_range(1..30);
        let ignore = (i % 2 == 0).then_some(n);
        let pred: Vec<usize> = (0..len).map(|_| r.gen_range(0..n)).collect();
        let mut gt: Vec<usize> = (0..len).map(|_| r.gen_range(0..n + ignore.is_some() as usize)).collect();
        gt[0] = 0;
        let got = compute_miou(&pred, &gt, n, ignore).unwrap();
        let (per, miou) = brute_miou(&pred, &gt, n, ignore);
        ensure(got.per_class == per && got.miou == miou, || format!("miou instance {}", i))?;
    }
    let toy = compute_miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, None).unwrap();
    ensure((toy.miou - 7.0 / 12.0).abs() < 1e-15, || format!("toy miou {}", toy.miou))?;
    Ok(format!("1000 acer and 1000 miou instances exact; toy miou {:.4}", toy.miou))
}

fn osmd(root: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_osmd"))
        .args(args)
        .env("OSMD_OUTPUT_ROOT", root)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("osmd {:?} failed: {}", args, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_9() -> Verdict {
    let root = scratch("reproducibility");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = cfg.to_str().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "resumed"].iter().map(|d| root.join(d)).collect();
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    osmd(&root, &["train", "--config", cfg, "--out", &s(&dirs[0])])?;
    osmd(&root, &["train", "--config", cfg, "--out", &s(&dirs[1])])?;
    let read = |d: &PathBuf, f: &str| fs::read(d.join(f)).map_err(|e| format!("{}: {}", d.join(f).display(), e));
    ensure(read(&dirs[0], METRICS_LOG)? == read(&dirs[1], METRICS_LOG)?, || "metrics logs differ".into())?;
    let stopped = osmd(&root, &["train", "--config", cfg, "--out", &s(&dirs[2]), "--stop-after-epochs", "3"])?;
    ensure(stopped.starts_with("interrupted"), || format!("expected an interruption, got {}", stopped))?;
    osmd(&root, &["train", "--config", cfg, "--out", &s(&dirs[2]), "--resume"])?;
    ensure(read(&dirs[0], RESULTS)? == read(&dirs[2], RESULTS)?, || "resumed results.summary differs".into())?;
    let log_len = read(&dirs[0], METRICS_LOG)?.len();
    Ok(format!("metrics.log byte-identical ({} bytes); resumed results.summary identical", log_len))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let names = [
        "loss oracles",
        "gradient checks",
        "zero/identity suite",
        "balancing contract",
        "frozen and wiring contracts",
        "end-to-end directional result",
        "ablation direction",
        "metric correctness",
        "reproducibility",
    ];
    let mut results: Vec<(u32, Verdict, Duration)> = Vec::new();
    let timed = |f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        (v, t.elapsed())
    };
    let simple: [(u32, fn() -> Verdict); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (8, criterion_8),
        (9, criterion_9),
    ];
    for (n, f) in simple.iter().filter(|(n, _)| *n <= 5) {
        if run(*n) {
            let (v, d) = timed(f);
            results.push((*n, v, d));
        }
    }
    if run(6) || run(7) {
        let t = Instant::now();
        let a = ablation();
        let shared = t.elapsed();
        for n in [6u32, 7] {
            if run(n) {
                let v = match &a {
                    Ok(a) if n == 6 => criterion_6(a),
                    Ok(a) => criterion_7(a),
                    Err(e) => Err(e.clone()),
                };
                results.push((n, v, shared));
            }
        }
    }
    for (n, f) in simple.iter().filter(|(n, _)| *n > 5) {
        if run(*n) {
            let (v, d) = timed(f);
            results.push((*n, v, d));
        }
    }
    let mut failed = 0;
    for (n, v, d) in &results {
        let (tag, detail) = match v {
            Ok(s) => ("PASS", s),
            Err(s) => {
                failed += 1;
                ("FAIL", s)
            }
        };
        println!("criterion {} {} [{}] {} ({:.1?})", n, tag, names[*n as usize - 1], detail, d);
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
