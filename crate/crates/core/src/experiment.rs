//! Run directories: pretraining, joint training, evaluation, checkpoints and the
//! ablation matrix.
//!
//! A run directory holds
//!
//! ```text
//! config.copy        effective config (TOML) the run was started with
//! config.digest      its digest
//! environment        build and platform stamp (JSON)
//! metrics.log        one JSON row per step and per epoch, append-only
//! snapshots/         pretrain-{ordinary,privileged}.snap, checkpoint.snap, final.snap
//! results.summary    final metrics (JSON)
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::LossWeights;
use crate::baselines::{build_variant, LossTerm, Recipe, Variant};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{generate_synth_dataset, load_directory_dataset, make_batches, read_archive, Dataset, Modality, ModalitySet};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{prefixes, FusionKind, ModelGraph};
use crate::nn::ParamStore;
use crate::optim::{learning_rate, Sgd};
use crate::snapshot::Snapshot;
use crate::train::{
    derive_seed, dev_threshold, evaluate, evaluate_unimodal, pretrain_unimodal, train_step, LoopSettings, StepContext,
    TrainState,
};

pub const CONFIG_COPY: &str = "config.copy";
pub const CONFIG_DIGEST: &str = "config.digest";
pub const ENVIRONMENT: &str = "environment";
pub const METRICS_LOG: &str = "metrics.log";
pub const RESULTS: &str = "results.summary";
pub const SNAPSHOTS: &str = "snapshots";
pub const CHECKPOINT: &str = "checkpoint.snap";
pub const FINAL: &str = "final.snap";

pub fn pretrain_file(modality: Modality) -> &'static str {
    match modality {
        Modality::Ordinary => "pretrain-ordinary.snap",
        Modality::Privileged => "pretrain-privileged.snap",
    }
}

/// Train, development and eval splits of one experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub dev: Dataset,
    pub eval: Dataset,
    pub digest: String,
    /// Bayes-optimal accuracies from ordinary, privileged and both latents (synthetic data only).
    pub bayes: Option<[f64; 3]>,
    pub warnings: Vec<String>,
}

impl PreparedData {
    fn channels(&self) -> Result<(usize, usize)> {
        match (self.train.ordinary_dims(), self.train.privileged_dims()) {
            (Some(o), Some(p)) => Ok((o[0], p[0])),
            _ => Err(Error::Data("training split is empty".into())),
        }
    }
}

fn fraction_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1))
}

/// Builds the splits named by the dataset block. The development split is the
/// trailing `run.dev_fraction` of the training split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut warnings = Vec::new();
    let mut bayes = None;
    let (train, eval) = match &cfg.dataset {
        DatasetConfig::Synth(spec) => {
            let d = generate_synth_dataset(spec)?;
            bayes = Some([
                d.bayes_accuracy(ModalitySet::Ordinary),
                d.bayes_accuracy(ModalitySet::Privileged),
                d.bayes_accuracy(ModalitySet::Both),
            ]);
            (d.train, d.eval)
        }
        DatasetConfig::Directory(dir) => {
            let report = load_directory_dataset(&dir.root, &dir.layout)?;
            for r in &report.rejected {
                warnings.push(format!("rejected {}: {}", r.stem, r.reason));
            }
            warnings.extend(report.warnings);
            let n = report.dataset.len();
            report.dataset.split_tail(fraction_count(n, dir.eval_fraction).max(1))
        }
        DatasetConfig::Archive(a) => {
            let (_, splits) = read_archive(&a.path)?;
            let mut train = None;
            let mut eval = None;
            for (name, d) in splits {
                match name.as_str() {
                    "train" => train = Some(d),
                    "eval" => eval = Some(d),
                    _ => warnings.push(format!("archive: ignoring split {}", name)),
                }
            }
            match (train, eval) {
                (Some(t), Some(e)) => (t, e),
                _ => return Err(Error::Data(format!("archive {}: needs train and eval splits", a.path.display()))),
            }
        }
    };
    let n = train.len();
    let (train, dev) = train.split_tail(fraction_count(n, cfg.run.dev_fraction));
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("empty train or eval split".into()));
    }
    let mut h = Sha256::new();
    for d in [&train, &dev, &eval] {
        h.update(d.digest().as_bytes());
    }
    Ok(PreparedData {
        train,
        dev,
        eval,
        digest: hex::encode(h.finalize()),
        bayes,
        warnings,
    })
}

/// The network for `recipe`, sized to the data.
pub fn build_graph(cfg: &ExperimentConfig, data: &PreparedData, fusion: FusionKind) -> Result<ModelGraph> {
    let (co, cp) = data.channels()?;
    Ok(ModelGraph::new(data.train.task_kind, data.train.n_classes, co, cp, &cfg.model, fusion)?
        .with_ae_width(cfg.variant.ae_width))
}

fn initial_store(graph: &ModelGraph, seed: u64) -> ParamStore {
    graph.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0)))
}

fn pretrain_settings(cfg: &ExperimentConfig) -> LoopSettings {
    let o = &cfg.optimizer;
    LoopSettings {
        lr: o.pretrain_lr(),
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        batch_size: o.batch_size(),
        schedule: o.schedule(),
        epochs: cfg.run.pretrain_epochs,
    }
}

fn pretrain_digest(cfg: &ExperimentConfig, data: &PreparedData, seed: u64, modality: Modality) -> String {
    let v = serde_json::json!({
        "data": data.digest,
        "model": cfg.model,
        "settings": pretrain_settings(cfg),
        "seed": seed,
        "modality": modality,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Parameters and eval metrics of the two pretrained unimodal branches.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParamStore,
    pub ordinary: MetricsRecord,
    pub privileged: MetricsRecord,
}

/// Pretrains one branch into `dir`, or reuses a snapshot there with a matching digest.
/// Returns the snapshot path and whether training ran.
pub fn ensure_pretrained_modality(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    modality: Modality,
    dir: &Path,
    force: bool,
) -> Result<(PathBuf, Snapshot, bool)> {
    let path = dir.join(pretrain_file(modality));
    let digest = pretrain_digest(cfg, data, seed, modality);
    if !force && path.exists() {
        let snap = Snapshot::load(&path)?;
        if snap.config_digest == digest {
            return Ok((path, snap, false));
        }
        log::warn!("{}: stale pretraining snapshot, retraining", path.display());
    }
    let graph = build_graph(cfg, data, FusionKind::CrossTranslation)?;
    let init = initial_store(&graph, seed);
    let settings = pretrain_settings(cfg);
    let params = pretrain_unimodal(&graph, &init, &data.train, modality, &settings, seed)?;
    let metrics = evaluate_unimodal(&graph, &params, &data.eval, modality, None)?;
    let steps = make_batches(&data.train, settings.batch_size, 0, false)?.num_batches() as u64 * settings.epochs;
    let mut snap = Snapshot::new(digest, steps, params);
    snap.metrics = serde_json::to_value(&metrics).expect("metrics serialize");
    snap.save(&path)?;
    Ok((path, snap, true))
}

pub fn ensure_pretrained(cfg: &ExperimentConfig, data: &PreparedData, seed: u64, dir: &Path, force: bool) -> Result<Pretrained> {
    let mut params = ParamStore::new();
    let mut metrics = Vec::new();
    for m in [Modality::Privileged, Modality::Ordinary] {
        let (_, snap, _) = ensure_pretrained_modality(cfg, data, seed, m, dir, force)?;
        params.merge_prefixed("", &snap.params);
        metrics.push(serde_json::from_value(snap.metrics).unwrap_or_default());
    }
    let ordinary = metrics.pop().unwrap();
    let privileged = metrics.pop().unwrap();
    Ok(Pretrained {
        params,
        ordinary,
        privileged,
    })
}

/// Applies the `--variant` and `--seed` style overrides and normalizes.
pub fn effective_config(cfg: &ExperimentConfig, variant: Option<Variant>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    if let Some(v) = variant {
        c.variant.variant = v;
    }
    if let Some(s) = seed {
        c.run.seed = s;
    }
    c.validate()?;
    Ok(c.normalized())
}

/// Default run directory: `<output_root>/<variant>-seed<seed>-<digest prefix>`.
pub fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run.output_root.join(format!(
        "{}-seed{}-{}",
        cfg.variant.variant,
        cfg.run.seed,
        &cfg.digest()[..12]
    ))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run directory; [`default_run_dir`] when `None`.
    pub out: Option<PathBuf>,
    /// Continue from `snapshots/checkpoint.snap`.
    pub resume: bool,
    /// Discard any previous contents of the run directory.
    pub force: bool,
    /// Stop after this many epochs in this invocation, leaving a resumable checkpoint.
    pub stop_after_epochs: Option<u64>,
    /// Where pretraining snapshots live; the run's `snapshots/` when `None`.
    pub pretrain_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// A results summary was already present; nothing ran.
    AlreadyComplete,
    /// Stopped early by `stop_after_epochs`.
    Interrupted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub config_digest: String,
    pub recipe_digest: String,
    pub dataset_digest: String,
    pub steps: u64,
    pub eval: MetricsRecord,
    pub eval_error: f64,
    pub dev: Option<MetricsRecord>,
    pub best_dev_error: Option<f64>,
    pub pretrained_ordinary: MetricsRecord,
    pub pretrained_privileged: MetricsRecord,
    /// Bayes-optimal accuracy from ordinary, privileged and both latents.
    pub bayes_accuracy: Option<[f64; 3]>,
    pub snapshot_checksum: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub summary: Option<RunSummary>,
}

/// One row of `metrics.log`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRow {
    Step {
        phase: String,
        epoch: u64,
        #[serde(flatten)]
        record: crate::train::StepRecord,
    },
    Epoch {
        phase: String,
        epoch: u64,
        step: u64,
        train_loss: f64,
        collapse: Option<f64>,
        dev: Option<MetricsRecord>,
        eval: Option<MetricsRecord>,
    },
}

/// Parses a metrics log; malformed rows are reported with their line number.
pub fn read_metrics_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {}", i + 1, e)))
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn environment_stamp() -> serde_json::Value {
    serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "debug_assertions": cfg!(debug_assertions),
        "float": "f64",
        "deterministic": true,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    log_len: u64,
}

/// Runs one experiment end to end.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let cfg = cfg.normalized();
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    for w in &data.warnings {
        log::warn!("{}", w);
    }
    run_with_data(&cfg, &data, opts)
}

/// [`run_experiment`] on already prepared splits.
pub fn run_with_data(cfg: &ExperimentConfig, data: &PreparedData, opts: &RunOptions) -> Result<RunOutcome> {
    let cfg = cfg.normalized();
    let dir = opts.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    let results = dir.join(RESULTS);
    if opts.force && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    if results.exists() {
        let summary: RunSummary = serde_json::from_slice(&fs::read(&results).map_err(|e| Error::io(&results, e))?)
            .map_err(|e| Error::format(&results, e.to_string()))?;
        if summary.config_digest == cfg.digest() {
            return Ok(RunOutcome {
                dir,
                status: RunStatus::AlreadyComplete,
                summary: Some(summary),
            });
        }
        return Err(Error::Config(format!(
            "{} holds a run of a different config; use --force or another --out",
            dir.display()
        )));
    }
    let snaps = dir.join(SNAPSHOTS);
    fs::create_dir_all(&snaps).map_err(|e| Error::io(&snaps, e))?;
    let digest = cfg.digest();
    write_atomic(&dir.join(CONFIG_COPY), cfg.to_toml_string().as_bytes())?;
    write_atomic(&dir.join(CONFIG_DIGEST), format!("{}\n", digest).as_bytes())?;
    let env = serde_json::to_string_pretty(&environment_stamp()).expect("json");
    write_atomic(&dir.join(ENVIRONMENT), env.as_bytes())?;

    let seed = cfg.run.seed;
    let pre_dir = opts.pretrain_dir.clone().unwrap_or_else(|| snaps.clone());
    let pretrained = ensure_pretrained(&cfg, data, seed, &pre_dir, false)?;

    let recipe = build_variant(&cfg.variant, cfg.model.fine_tune_ordinary)?;
    let graph = build_graph(&cfg, data, recipe.fusion_kind)?;
    let log_path = dir.join(METRICS_LOG);
    let ckpt_path = snaps.join(CHECKPOINT);

    let mut state = if opts.resume && ckpt_path.exists() {
        let snap = Snapshot::load(&ckpt_path)?;
        if snap.config_digest != digest {
            return Err(Error::Config(format!(
                "{}: checkpoint belongs to a different config",
                ckpt_path.display()
            )));
        }
        let (state, extra) = TrainState::from_snapshot(&snap)?;
        let meta: CheckpointMeta =
            serde_json::from_value(extra).map_err(|e| Error::format(&ckpt_path, e.to_string()))?;
        let log = OpenOptions::new()
            .write(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        log.set_len(meta.log_len).map_err(|e| Error::io(&log_path, e))?;
        state
    } else {
        let _ = fs::remove_file(&ckpt_path);
        fs::write(&log_path, b"").map_err(|e| Error::io(&log_path, e))?;
        let mut store = initial_store(&graph, seed);
        store.merge_prefixed("", &pretrained.params);
        if cfg.model.warm_start_shared {
            let ord = pretrained.params.extract_prefix(prefixes::ORDINARY);
            store.merge_prefixed(prefixes::SHARED, &ord);
        }
        TrainState::new(store, fresh_optimizer(&cfg)?, fresh_weights(&cfg, &recipe, 0)?)
    };

    let jdn = cfg.losses.jdn();
    let batch_size = cfg.optimizer.batch_size();
    let per_epoch = make_batches(&data.train, batch_size, 0, false)?.num_batches() as u64;
    let epochs = cfg.run.epochs;
    let mut ran = 0u64;
    let mut last_eval: Option<(MetricsRecord, Option<MetricsRecord>)> = None;

    while state.phase < recipe.phases.len() {
        if state.epoch >= epochs {
            state.phase += 1;
            state.epoch = 0;
            if state.phase < recipe.phases.len() {
                state.optimizer = fresh_optimizer(&cfg)?;
                state.weights = fresh_weights(&cfg, &recipe, state.phase)?;
            }
            continue;
        }
        if opts.stop_after_epochs.is_some_and(|n| ran >= n) {
            return Ok(RunOutcome {
                dir,
                status: RunStatus::Interrupted,
                summary: None,
            });
        }
        let phase = &recipe.phases[state.phase];
        let mut rows = Vec::new();
        let mut loss_sum = 0.0;
        let mut collapse: Option<(f64, usize)> = None;
        let shuffle = derive_seed(seed, &phase.name, state.epoch);
        for (b, batch) in make_batches(&data.train, batch_size, shuffle, false)?.enumerate() {
            let batch = batch?;
            let phase_step = state.epoch * per_epoch + b as u64;
            let lr = learning_rate(cfg.optimizer.schedule(), cfg.optimizer.lr(), phase_step, per_epoch * epochs);
            let ctx = StepContext {
                graph: &graph,
                recipe: &recipe,
                phase,
                jdn: &jdn,
                lr,
                seed: derive_seed(seed, "positions", state.step),
                ignore_label: data.train.ignore_label,
            };
            let rec = train_step(&mut state, &batch, &ctx)?;
            loss_sum += rec.report.l_total;
            if let Some(c) = rec.collapse {
                let e = collapse.get_or_insert((0.0, 0));
                e.0 += c.min();
                e.1 += 1;
            }
            rows.push(LogRow::Step {
                phase: phase.name.clone(),
                epoch: state.epoch,
                record: rec,
            });
        }
        state.epoch += 1;
        let collapse = collapse.map(|(s, n)| s / n as f64);
        if let Some(c) = collapse {
            if phase.has(LossTerm::Ctn) && c < cfg.losses.collapse_floor {
                return Err(Error::Training {
                    step: state.step,
                    detail: format!(
                        "translation collapse: mean |T(rep_o)| {:.3e} below floor {:.3e}",
                        c, cfg.losses.collapse_floor
                    ),
                });
            }
        }
        let last = state.phase + 1 == recipe.phases.len() && state.epoch == epochs;
        let (dev_m, eval_m) = if last || state.epoch % cfg.run.eval_every == 0 {
            let thr = dev_threshold(&graph, &state.store, &data.dev)?;
            let dev_m = if data.dev.is_empty() {
                None
            } else {
                Some(evaluate(&graph, &state.store, &data.dev, thr)?)
            };
            let eval_m = evaluate(&graph, &state.store, &data.eval, thr)?;
            let track = dev_m.as_ref().unwrap_or(&eval_m).error();
            if let Some(e) = track {
                if state.best_error.map_or(true, |b| e < b) {
                    state.best_error = Some(e);
                }
            }
            last_eval = Some((eval_m.clone(), dev_m.clone()));
            (dev_m, Some(eval_m))
        } else {
            (None, None)
        };
        rows.push(LogRow::Epoch {
            phase: phase.name.clone(),
            epoch: state.epoch,
            step: state.step,
            train_loss: loss_sum / per_epoch.max(1) as f64,
            collapse,
            dev: dev_m,
            eval: eval_m,
        });
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r).expect("row serializes"));
            text.push('\n');
        }
        let mut log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        log.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        let log_len = log.metadata().map_err(|e| Error::io(&log_path, e))?.len();
        let extra = serde_json::to_value(CheckpointMeta { log_len }).expect("json");
        state.to_snapshot(&digest, extra).save(&ckpt_path)?;
        ran += 1;
    }

    let (eval_m, dev_m) = match last_eval {
        Some(e) => e,
        None => {
            // Resumed after the final epoch was checkpointed but before the summary was written.
            let thr = dev_threshold(&graph, &state.store, &data.dev)?;
            let dev_m = (!data.dev.is_empty())
                .then(|| evaluate(&graph, &state.store, &data.dev, thr))
                .transpose()?;
            (evaluate(&graph, &state.store, &data.eval, thr)?, dev_m)
        }
    };
    let mut fin = Snapshot::new(digest.clone(), state.step, state.store.clone());
    fin.metrics = serde_json::to_value(&eval_m).expect("json");
    fin.save(&snaps.join(FINAL))?;
    let summary = RunSummary {
        variant: cfg.variant.variant,
        seed,
        config_digest: digest,
        recipe_digest: recipe.digest(),
        dataset_digest: data.digest.clone(),
        steps: state.step,
        eval_error: eval_m
            .error()
            .ok_or_else(|| Error::Metric("no error metric for eval split".into()))?,
        eval: eval_m,
        dev: dev_m,
        best_dev_error: state.best_error,
        pretrained_ordinary: pretrained.ordinary,
        pretrained_privileged: pretrained.privileged,
        bayes_accuracy: data.bayes,
        snapshot_checksum: fin.checksum(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("json");
    write_atomic(&results, text.as_bytes())?;
    Ok(RunOutcome {
        dir,
        status: RunStatus::Completed,
        summary: Some(summary),
    })
}

fn fresh_optimizer(cfg: &ExperimentConfig) -> Result<Sgd> {
    Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay)
}

fn fresh_weights(cfg: &ExperimentConfig, recipe: &Recipe, phase: usize) -> Result<LossWeights> {
    let p = &recipe.phases[phase];
    Ok(LossWeights::new(cfg.losses.target_ratio, cfg.losses.ema_decay)?
        .with_slots(p.transfer_loss().is_some(), p.translation_loss().is_some()))
}

/// Re-evaluates the final snapshot of a finished run directory on its eval split.
pub fn evaluate_run(dir: &Path) -> Result<MetricsRecord> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_COPY))?;
    let data = prepare_data(&cfg)?;
    let recipe = build_variant(&cfg.variant, cfg.model.fine_tune_ordinary)?;
    let graph = build_graph(&cfg, &data, recipe.fusion_kind)?;
    let snap = Snapshot::load(&dir.join(SNAPSHOTS).join(FINAL))?;
    let thr = dev_threshold(&graph, &snap.params, &data.dev)?;
    evaluate(&graph, &snap.params, &data.eval, thr)
}

/// One (variant, seed) cell of an ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// `ok`, or the failure message.
    pub status: String,
    pub eval_error: Option<f64>,
    pub accuracy: Option<f64>,
    pub acer: Option<f64>,
    pub miou: Option<f64>,
    pub dataset_digest: String,
}

/// Per-variant mean and sample standard deviation of the eval error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: Variant,
    pub n_ok: usize,
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub stats: Vec<VariantStats>,
    pub table_path: PathBuf,
    pub summary_path: PathBuf,
}

pub const ABLATION_TABLE: &str = "ablation.tsv";
pub const ABLATION_SUMMARY: &str = "ablation_summary.tsv";

pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), sd)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.6}", x))
}

/// Runs every variant over every seed, `cfg.run.workers` runs at a time. Each seed's
/// pretraining is shared by all variants. A failing cell is recorded in its row.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[Variant], seeds: &[u64], out: &Path) -> Result<AblationTable> {
    let cfg = cfg.normalized();
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let workers = cfg.run.workers.max(1);

    let seed_dirs: Vec<PathBuf> = seeds.iter().map(|s| out.join("pretrain").join(format!("seed{}", s))).collect();
    let pre_errors: Vec<Option<String>> = parallel_map(seeds.len(), workers, |i| {
        let mut c = cfg.clone();
        c.run.seed = seeds[i];
        ensure_pretrained(&c, &data, seeds[i], &seed_dirs[i], false).err().map(|e| e.to_string())
    });

    let jobs: Vec<(Variant, usize)> = variants
        .iter()
        .flat_map(|&v| (0..seeds.len()).map(move |i| (v, i)))
        .collect();
    let rows = parallel_map(jobs.len(), workers, |j| {
        let (variant, si) = jobs[j];
        let seed = seeds[si];
        let mut row = AblationRow {
            variant,
            seed,
            status: "ok".into(),
            eval_error: None,
            accuracy: None,
            acer: None,
            miou: None,
            dataset_digest: data.digest.clone(),
        };
        if let Some(e) = &pre_errors[si] {
            row.status = format!("pretraining failed: {}", e);
            return row;
        }
        let result = effective_config(&cfg, Some(variant), Some(seed)).and_then(|c| {
            let opts = RunOptions {
                out: Some(out.join("runs").join(format!("{}-seed{}", variant, seed))),
                resume: true,
                pretrain_dir: Some(seed_dirs[si].clone()),
                ..Default::default()
            };
            run_with_data(&c, &data, &opts)
        });
        match result.map(|o| o.summary) {
            Ok(Some(s)) => {
                row.eval_error = Some(s.eval_error);
                row.accuracy = s.eval.accuracy;
                row.acer = s.eval.acer;
                row.miou = s.eval.miou;
            }
            Ok(None) => row.status = "incomplete".into(),
            Err(e) => row.status = e.to_string().replace(['\t', '\n'], " "),
        }
        row
    });

    let mut table = String::from("variant\tseed\tstatus\teval_error\taccuracy\tacer\tmiou\tdataset_digest\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.seed,
            r.status,
            opt_cell(r.eval_error),
            opt_cell(r.accuracy),
            opt_cell(r.acer),
            opt_cell(r.miou),
            r.dataset_digest
        ));
    }
    let stats: Vec<VariantStats> = variants
        .iter()
        .map(|&v| {
            let errs: Vec<f64> = rows.iter().filter(|r| r.variant == v).filter_map(|r| r.eval_error).collect();
            let (mean_error, std_error) = mean_std(&errs);
            VariantStats {
                variant: v,
                n_ok: errs.len(),
                mean_error,
                std_error,
            }
        })
        .collect();
    let mut summary = String::from("variant\tn\tmean_error\tstd_error\n");
    for s in &stats {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.variant,
            s.n_ok,
            opt_cell(s.mean_error),
            opt_cell(s.std_error)
        ));
    }
    let table_path = out.join(ABLATION_TABLE);
    let summary_path = out.join(ABLATION_SUMMARY);
    for (path, text) in [(&table_path, &table), (&summary_path, &summary)] {
        write_atomic(path, text.as_bytes())?;
        let side = PathBuf::from(format!("{}.sha256", path.display()));
        let name = path.file_name().unwrap().to_string_lossy();
        write_atomic(&side, format!("{}  {}\n", hex::encode(Sha256::digest(text.as_bytes())), name).as_bytes())?;
    }
    Ok(AblationTable {
        rows,
        stats,
        table_path,
        summary_path,
    })
}

/// `f(0..n)` on up to `workers` threads; results keep index order.
fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(n).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                out.lock().unwrap()[i] = Some(v);
            });
        }
    });
    out.into_inner().unwrap().into_iter().map(|v| v.expect("every index ran")).collect()
}
