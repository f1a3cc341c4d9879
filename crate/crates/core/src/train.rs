//! Single training steps, unimodal pretraining and evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::balance::{self, GradNorms, LossReport, LossWeights, RawLosses};
use crate::baselines::{
    autoencoder_translation_loss, feature_hint_loss, relation_kd_loss, response_kd_loss, LossTerm, Phase, Recipe,
    TtlTarget,
};
use crate::ctn::{ctn_from_transformed, CollapseStats, CtnTerms};
use crate::data::{make_batches, Dataset, Modality, PairedBatch, TaskKind};
use crate::error::{Error, Result};
use crate::jdn::{jdn_loss, logit_rows, JdnConfig, JdnTerms};
use crate::metrics::{accuracy, compute_acer, compute_miou, eer_threshold, MetricsRecord};
use crate::model::{prefixes, FeatureTransform, FusionKind, ModelGraph};
use crate::nn::{apply_buffer_updates, grad_norm, GradMap, Mode, ParamStore, Session};
use crate::optim::{learning_rate, Schedule, Sgd};
use crate::snapshot::Snapshot;
use crate::tensor::Tensor;

/// A seed for one named random stream, derived from the run seed.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Everything a training step needs besides the mutable state.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub graph: &'a ModelGraph,
    pub recipe: &'a Recipe,
    pub phase: &'a Phase,
    pub jdn: &'a JdnConfig,
    pub lr: f64,
    pub seed: u64,
    pub ignore_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: Sgd,
    pub weights: LossWeights,
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    /// Index of the current recipe phase.
    pub phase: usize,
    /// Epochs completed within the current phase.
    pub epoch: u64,
    pub best_error: Option<f64>,
}

impl TrainState {
    pub fn new(store: ParamStore, optimizer: Sgd, weights: LossWeights) -> Self {
        TrainState {
            store,
            optimizer,
            weights,
            step: 0,
            phase: 0,
            epoch: 0,
            best_error: None,
        }
    }

    /// Packs parameters, optimizer velocities and counters into a snapshot.
    pub fn to_snapshot(&self, config_digest: &str, extra: serde_json::Value) -> Snapshot {
        let mut params = self.store.clone();
        for (k, v) in &self.optimizer.velocity {
            params.insert(format!("{}{}", VELOCITY, k), v.clone());
        }
        let mut snap = Snapshot::new(config_digest, self.step, params);
        snap.extra = serde_json::json!({
            "state": StateMeta {
                momentum: self.optimizer.momentum,
                weight_decay: self.optimizer.weight_decay,
                weights: self.weights,
                phase: self.phase,
                epoch: self.epoch,
                best_error: self.best_error,
            },
            "run": extra,
        });
        snap
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<(Self, serde_json::Value)> {
        let meta: StateMeta = serde_json::from_value(snap.extra["state"].clone())
            .map_err(|e| Error::Data(format!("checkpoint state: {}", e)))?;
        let mut store = ParamStore::new();
        let mut optimizer = Sgd::new(meta.momentum, meta.weight_decay)?;
        for (k, v) in snap.params.iter() {
            match k.strip_prefix(VELOCITY) {
                Some(name) => {
                    optimizer.velocity.insert(name.to_string(), v.clone());
                }
                None => store.insert(k.clone(), v.clone()),
            }
        }
        Ok((
            TrainState {
                store,
                optimizer,
                weights: meta.weights,
                step: snap.step,
                phase: meta.phase,
                epoch: meta.epoch,
                best_error: meta.best_error,
            },
            snap.extra["run"].clone(),
        ))
    }
}

const VELOCITY: &str = "velocity/";

#[derive(Serialize, Deserialize)]
struct StateMeta {
    momentum: f64,
    weight_decay: f64,
    weights: LossWeights,
    phase: usize,
    epoch: u64,
    best_error: Option<f64>,
}

/// What one step did, for the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    pub grad_norms: GradNorms,
    pub jdn: Option<JdnTerms>,
    pub ctn: Option<CtnTerms>,
    pub collapse: Option<CollapseStats>,
}

fn task_rows(s: &mut Session, logits: Var) -> Result<Var> {
    if s.value(logits).rank() == 4 {
        s.tape.nchw_to_rows(logits)
    } else {
        Ok(logits)
    }
}

fn is_trainable(phase: &Phase, prefix: &str) -> bool {
    phase.trainable.iter().any(|p| p == prefix)
}

fn mode_for(phase: &Phase, prefix: &str) -> Mode {
    if is_trainable(phase, prefix) {
        Mode::Train
    } else {
        Mode::Eval
    }
}

struct StepLosses {
    transfer: Option<Var>,
    translation: Option<Var>,
    ttl: Var,
    jdn: Option<JdnTerms>,
    ctn: Option<CtnTerms>,
    collapse: Option<CollapseStats>,
}

fn forward_losses(s: &mut Session, batch: &PairedBatch, ctx: &StepContext) -> Result<StepLosses> {
    let g = ctx.graph;
    let ph = ctx.phase;
    let transfer_term = ph.transfer_loss();
    let translation_term = ph.translation_loss();
    let fusion = match ph.ttl_target {
        TtlTarget::SharedHead => None,
        TtlTarget::Inference => Some(ctx.recipe.fusion_kind),
    };
    let need_shared = transfer_term.is_some() || fusion.is_some_and(|f| f != FusionKind::OrdinaryOnly)
        || ph.ttl_target == TtlTarget::SharedHead;
    let need_ordinary = translation_term.is_some() || fusion.is_some();
    let need_head_s = matches!(transfer_term, Some(LossTerm::Jdn | LossTerm::ResponseKd))
        || ph.ttl_target == TtlTarget::SharedHead
        || fusion == Some(FusionKind::LogitSum);

    let xo = s.input(batch.x_o.clone());
    let rep_s = if need_shared {
        Some(g.shared.forward(s, xo, mode_for(ph, prefixes::SHARED))?)
    } else {
        None
    };
    let ordinary_frozen = !is_trainable(ph, prefixes::ORDINARY);
    let rep_o = if need_ordinary {
        Some(g.ordinary_rep(s, xo, Mode::Train, ordinary_frozen)?)
    } else {
        None
    };
    let logits_s = match (need_head_s, rep_s) {
        (true, Some(r)) => Some(g.head_s.forward(s, r)?),
        _ => None,
    };
    let privileged = if ph.uses_privileged {
        let xp = s.input(batch.x_p.clone());
        Some(g.privileged_branch(s, xp)?)
    } else {
        None
    };
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::structural(what, "not computed for this phase"));

    let mut jdn = None;
    let transfer = match transfer_term {
        None => None,
        Some(term) => {
            let (rep_p, logits_p) =
                privileged.ok_or_else(|| Error::structural("privileged", "not computed for this phase"))?;
            let rs = need(rep_s, "shared")?;
            Some(match term {
                LossTerm::Jdn => {
                    let out = jdn_loss(&mut s.tape, rs, rep_p, need(logits_s, "head_s")?, logits_p, ctx.jdn, ctx.seed)?;
                    jdn = Some(out.terms);
                    out.loss
                }
                LossTerm::FeatureHint => feature_hint_loss(&mut s.tape, rs, rep_p)?,
                LossTerm::RelationKd => {
                    if batch.len() < 2 {
                        // a single-sample batch has no relations to match
                        s.tape.constant(Tensor::scalar(0.0))
                    } else {
                        relation_kd_loss(&mut s.tape, rs, rep_p)?
                    }
                }
                LossTerm::ResponseKd => {
                    let (lp, ls) = logit_rows(
                        &mut s.tape,
                        logits_p,
                        need(logits_s, "head_s")?,
                        ctx.jdn.max_positions,
                        ctx.seed,
                    )?;
                    response_kd_loss(&mut s.tape, lp, ls, ctx.recipe.spec.temperature)?
                }
                other => return Err(Error::Config(format!("{:?} is not a transfer loss", other))),
            })
        }
    };

    let mut ctn = None;
    let mut collapse = None;
    let mut transformed = None;
    let mut ae_out = None;
    let translation = match translation_term {
        None => None,
        Some(LossTerm::Ctn) => {
            let t = g.transform_pairs(s, need(rep_s, "shared")?, need(rep_o, "ordinary")?, mode_for(ph, prefixes::T1))?;
            let out = ctn_from_transformed(&mut s.tape, &t)?;
            ctn = Some(out.terms);
            collapse = Some(CollapseStats::from_transformed(&s.tape, &t));
            transformed = Some(t);
            Some(out.loss)
        }
        Some(LossTerm::AeTranslation) => {
            let rs = need(rep_s, "shared")?;
            let mode = mode_for(ph, prefixes::AE);
            let loss = autoencoder_translation_loss(s, rs, need(rep_o, "ordinary")?, &g.ae, mode)?;
            ae_out = Some(g.ae.apply(s, rs, mode)?);
            Some(loss)
        }
        Some(other) => return Err(Error::Config(format!("{:?} is not a translation loss", other))),
    };

    let logits = match fusion {
        None => need(logits_s, "head_s")?,
        Some(FusionKind::CrossTranslation) => {
            let t = match transformed {
                Some(t) => t,
                None => g.transform_pairs(s, need(rep_s, "shared")?, need(rep_o, "ordinary")?, mode_for(ph, prefixes::T1))?,
            };
            let fused = g.fuse(s, &t)?;
            g.task_head.forward(s, fused)?
        }
        Some(FusionKind::LogitSum) => {
            let lo = g.head_o.forward(s, need(rep_o, "ordinary")?)?;
            s.tape.add(need(logits_s, "head_s")?, lo)?
        }
        Some(FusionKind::AutoEncoderConcat) => {
            let a = match ae_out {
                Some(a) => a,
                None => g.ae.apply(s, need(rep_s, "shared")?, mode_for(ph, prefixes::AE))?,
            };
            let cat = s.tape.concat(&[a, need(rep_o, "ordinary")?])?;
            let fused = g.ae_fusion.forward(s, cat)?;
            g.task_head.forward(s, fused)?
        }
        Some(FusionKind::OrdinaryOnly) => g.head_o.forward(s, need(rep_o, "ordinary")?)?,
    };
    let rows = task_rows(s, logits)?;
    let ttl = s.tape.cross_entropy(rows, &batch.y.rows(ctx.ignore_label))?;
    Ok(StepLosses {
        transfer,
        translation,
        ttl,
        jdn,
        ctn,
        collapse,
    })
}

/// One forward pass, loss balancing, per-loss backward passes and an optimizer
/// step restricted to the phase's trainable parameters.
pub fn train_step(state: &mut TrainState, batch: &PairedBatch, ctx: &StepContext) -> Result<StepRecord> {
    let step = state.step;
    let (losses, grads, buffers) = {
        let mut s = Session::new(&state.store);
        let l = forward_losses(&mut s, batch, ctx)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| s.value(v).item());
        let raw = RawLosses {
            l_jdn: value(l.transfer),
            l_ctn: value(l.translation),
            l_ttl: s.value(l.ttl).item(),
        };
        let g_ttl = s.grads(l.ttl)?;
        let g_a = l.transfer.map(|v| s.grads(v)).transpose()?;
        let g_b = l.translation.map(|v| s.grads(v)).transpose()?;
        let buffers = s.take_buffer_updates();
        ((raw, l.jdn, l.ctn, l.collapse), (g_a, g_b, g_ttl), buffers)
    };
    let (raw, jdn, ctn, collapse) = losses;
    let (g_a, g_b, g_ttl) = grads;
    let norm = |g: &Option<GradMap>| g.as_ref().map_or(0.0, |g| grad_norm(g, prefixes::SHARED));
    let norms = GradNorms {
        g_jdn: norm(&g_a),
        g_ctn: norm(&g_b),
        g_ttl: grad_norm(&g_ttl, prefixes::SHARED),
    };

    let weights = state
        .weights
        .with_slots(g_a.is_some(), g_b.is_some());
    let weights = balance::update_weights(raw, norms, &weights).map_err(|e| Error::Training {
        step,
        detail: e.to_string(),
    })?;
    let report = balance::total_loss(raw, &weights).map_err(|e| Error::Training {
        step,
        detail: format!("{} ({})", e, serde_json::to_string(&raw).unwrap_or_default()),
    })?;
    if !report.l_total.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("non-finite loss: {}", serde_json::to_string(&report).unwrap_or_default()),
        });
    }

    let mut total = GradMap::new();
    for (k, g) in &g_ttl {
        if ctx.phase.is_trainable(k) {
            total.insert(k.clone(), g.clone());
        }
    }
    for (w, g) in [(weights.alpha, &g_a), (weights.beta, &g_b)] {
        let Some(g) = g else { continue };
        for (k, gi) in g {
            if !ctx.phase.is_trainable(k) {
                continue;
            }
            total
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(gi.shape()))
                .axpy(w, gi);
        }
    }
    if let Some((k, _)) = total.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Training {
            step,
            detail: format!("non-finite gradient for {}", k),
        });
    }
    state.optimizer.step(&mut state.store, &total, ctx.lr)?;
    apply_buffer_updates(&mut state.store, buffers);
    state.weights = weights;
    state.step += 1;
    Ok(StepRecord {
        step,
        lr: ctx.lr,
        report,
        grad_norms: norms,
        jdn,
        ctn,
        collapse,
    })
}

/// Optimizer settings of one training loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub epochs: u64,
}

fn modality_parts(graph: &ModelGraph, modality: Modality) -> (&crate::model::Encoder, &crate::model::Head, [&'static str; 2]) {
    match modality {
        Modality::Ordinary => (&graph.ordinary, &graph.head_o, [prefixes::ORDINARY, prefixes::HEAD_O]),
        Modality::Privileged => (&graph.privileged, &graph.head_p, [prefixes::PRIVILEGED, prefixes::HEAD_P]),
    }
}

fn modality_input(batch: &PairedBatch, modality: Modality) -> &Tensor {
    match modality {
        Modality::Ordinary => &batch.x_o,
        Modality::Privileged => &batch.x_p,
    }
}

/// Trains one encoder and its head on a single modality with the task loss.
/// Returns the parameters of those two modules after `settings.epochs` epochs.
pub fn pretrain_unimodal(
    graph: &ModelGraph,
    init: &ParamStore,
    train: &Dataset,
    modality: Modality,
    settings: &LoopSettings,
    seed: u64,
) -> Result<ParamStore> {
    let (encoder, head, names) = modality_parts(graph, modality);
    let mut store = ParamStore::new();
    for p in names {
        store.merge_prefixed(p, &init.extract_prefix(p));
    }
    let mut opt = Sgd::new(settings.momentum, settings.weight_decay)?;
    let stream = match modality {
        Modality::Ordinary => "pretrain-ordinary",
        Modality::Privileged => "pretrain-privileged",
    };
    let per_epoch = make_batches(train, settings.batch_size, 0, false)?.num_batches() as u64;
    let total = per_epoch * settings.epochs;
    let mut step = 0u64;
    for epoch in 0..settings.epochs {
        for batch in make_batches(train, settings.batch_size, derive_seed(seed, stream, epoch), false)? {
            let batch = batch?;
            let (grads, buffers, loss) = {
                let mut s = Session::new(&store);
                let x = s.input(modality_input(&batch, modality).clone());
                let rep = encoder.forward(&mut s, x, Mode::Train)?;
                let logits = head.forward(&mut s, rep)?;
                let rows = task_rows(&mut s, logits)?;
                let l = s.tape.cross_entropy(rows, &batch.y.rows(train.ignore_label))?;
                (s.grads(l)?, s.take_buffer_updates(), s.value(l).item())
            };
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("non-finite {} pretraining loss", stream),
                });
            }
            let lr = learning_rate(settings.schedule, settings.lr, step, total);
            opt.step(&mut store, &grads, lr)?;
            apply_buffer_updates(&mut store, buffers);
            step += 1;
        }
    }
    Ok(store)
}

/// Logits of one unimodal branch in evaluation mode.
pub fn unimodal_logits(graph: &ModelGraph, store: &ParamStore, x: &Tensor, modality: Modality) -> Result<Tensor> {
    let (encoder, head, _) = modality_parts(graph, modality);
    let mut s = Session::new(store);
    let xv = s.input(x.clone());
    let rep = encoder.forward(&mut s, xv, Mode::Eval)?;
    let l = head.forward(&mut s, rep)?;
    Ok(s.value(l).clone())
}

/// Rows of logits (one per sample, or per position) for a whole dataset.
fn collect_logits(
    dataset: &Dataset,
    chunk: usize,
    mut f: impl FnMut(&PairedBatch) -> Result<Tensor>,
) -> Result<(Vec<f64>, usize, Vec<Option<usize>>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let batch = PairedBatch::from_indices(dataset, part)?;
        let logits = f(&batch)?;
        let rows = if logits.rank() == 4 { logits.nchw_to_rows() } else { logits };
        n = rows.shape()[1];
        data.extend_from_slice(rows.data());
        labels.extend(batch.y.rows(dataset.ignore_label));
    }
    Ok((data, n, labels))
}

const EVAL_CHUNK: usize = 256;

/// Task metrics from `[rows × n]` logits; `None` labels (ignored positions) are skipped. Binary classification scores are the
/// class-1 probabilities, compared against `threshold` (0.5 when `None`).
pub fn metrics_from_logits(
    task: TaskKind,
    n_classes: usize,
    logits: &[f64],
    labels: &[Option<usize>],
    threshold: Option<f64>,
) -> Result<MetricsRecord> {
    if labels.is_empty() {
        return Err(Error::Metric("evaluation set is empty".into()));
    }
    let rows = Tensor::new(vec![labels.len(), n_classes], logits.to_vec())?;
    let probs = crate::autograd::softmax_rows(&rows);
    let pred = rows.argmax_rows();
    let mut ce = 0.0;
    let mut counted = 0usize;
    for (i, y) in labels.iter().enumerate() {
        if let Some(y) = y {
            ce -= (probs.row(i)[*y] + crate::jdn::KL_EPS).ln();
            counted += 1;
        }
    }
    let mut rec = MetricsRecord {
        loss: (counted > 0).then(|| ce / counted as f64),
        ..Default::default()
    };
    let (vp, vg): (Vec<usize>, Vec<usize>) = pred
        .iter()
        .zip(labels)
        .filter_map(|(p, y)| y.map(|y| (*p, y)))
        .unzip();
    rec.accuracy = Some(accuracy(&vp, &vg)?);
    match task {
        TaskKind::Classification if n_classes == 2 => {
            let scores: Vec<f64> = (0..labels.len()).map(|i| probs.row(i)[1]).collect();
            let t = threshold.unwrap_or(0.5);
            let r = compute_acer(&scores, &vg, t)?;
            rec.apcer = Some(r.apcer);
            rec.bpcer = Some(r.bpcer);
            rec.acer = Some(r.acer);
            rec.threshold = Some(t);
        }
        TaskKind::Classification => {}
        TaskKind::Segmentation => {
            let r = compute_miou(&vp, &vg, n_classes, None)?;
            rec.miou = Some(r.miou);
            rec.per_class_iou = Some(r.per_class);
        }
    }
    Ok(rec)
}

/// Ordinary-only inference over `dataset` and the resulting task metrics. Neither
/// parameters nor running statistics are modified.
pub fn evaluate(graph: &ModelGraph, store: &ParamStore, dataset: &Dataset, threshold: Option<f64>) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let (logits, n, labels) = collect_logits(dataset, EVAL_CHUNK, |b| Ok(graph.forward_inference(store, &b.x_o)?.logits))?;
    metrics_from_logits(dataset.task_kind, n, &logits, &labels, threshold)
}

/// Metrics of a single pretrained branch on its own modality.
pub fn evaluate_unimodal(
    graph: &ModelGraph,
    store: &ParamStore,
    dataset: &Dataset,
    modality: Modality,
    threshold: Option<f64>,
) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let (logits, n, labels) = collect_logits(dataset, EVAL_CHUNK, |b| {
        unimodal_logits(graph, store, modality_input(b, modality), modality)
    })?;
    metrics_from_logits(dataset.task_kind, n, &logits, &labels, threshold)
}

/// Equal-error-rate threshold of the inference path on a development split; `None`
/// unless the task is binary classification with both classes present.
pub fn dev_threshold(graph: &ModelGraph, store: &ParamStore, dev: &Dataset) -> Result<Option<f64>> {
    if dev.task_kind != TaskKind::Classification || dev.n_classes != 2 || dev.is_empty() {
        return Ok(None);
    }
    let (logits, _, labels) = collect_logits(dev, EVAL_CHUNK, |b| Ok(graph.forward_inference(store, &b.x_o)?.logits))?;
    let scores: Vec<f64> = logits.chunks(2).map(|r| crate::autograd::softmax_rows(&Tensor::from_rows(&[r.to_vec()])).data()[1]).collect();
    let labels: Vec<usize> = labels.into_iter().flatten().collect();
    if !labels.contains(&0) || !labels.contains(&1) {
        return Ok(None);
    }
    eer_threshold(&scores, &labels).map(Some)
}
