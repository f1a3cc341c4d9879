//! `osmd`: pretrain, train, ablate, evaluate and plot.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 training, 6 i/o.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use osmd_core::baselines::Variant;
use osmd_core::config::ExperimentConfig;
use osmd_core::data::Modality;
use osmd_core::experiment::{
    default_run_dir, effective_config, ensure_pretrained_modality, evaluate_run, prepare_data, run_ablation,
    run_experiment, RunOptions, RunStatus,
};
use osmd_core::{Error, ErrorClass};

/// Overrides `run.output_root` from the config file.
pub const OUTPUT_ROOT_ENV: &str = "OSMD_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "osmd", version, about = "One-stage modality distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Ordinary,
    Privileged,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the unimodal encoders and heads.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        modality: ModalityArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Retrain even when a matching snapshot exists.
        #[arg(long)]
        force: bool,
        /// Snapshot directory (default: <output root>/pretrain/seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's variant.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Discard an existing run directory.
        #[arg(long)]
        force: bool,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many epochs, leaving a checkpoint.
        #[arg(long, hide = true)]
        stop_after_epochs: Option<u64>,
    },
    /// Run the ablation variants over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds (default: run.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also run the two-stage comparator.
        #[arg(long)]
        with_two_stage: bool,
        /// Comma-separated subset of variants (default: the ablation set).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (default: <output root>/ablation-<digest prefix>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate the final snapshot of a run directory.
    Evaluate {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write SVG plots for a run directory or an ablation table.
    Plot {
        /// Run directory, metrics.log, ablation directory or ablation table.
        path: PathBuf,
        /// Output directory (default: next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => 3,
            ErrorClass::Data => 4,
            ErrorClass::Training => 5,
            ErrorClass::Io => 6,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(Failure {
            code: 3,
            message: format!("config file not found: {}", path.display()),
        });
    }
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
        cfg.run.output_root = PathBuf::from(root);
    }
    Ok(cfg)
}

fn cmd_pretrain(config: &Path, modality: ModalityArg, seed: Option<u64>, force: bool, out: Option<PathBuf>) -> CliResult {
    let cfg = effective_config(&load_config(config)?, None, seed)?;
    let seed = cfg.run.seed;
    let dir = out.unwrap_or_else(|| cfg.run.output_root.join("pretrain").join(format!("seed{}", seed)));
    let data = prepare_data(&cfg)?;
    let which: &[Modality] = match modality {
        ModalityArg::Ordinary => &[Modality::Ordinary],
        ModalityArg::Privileged => &[Modality::Privileged],
        ModalityArg::Both => &[Modality::Privileged, Modality::Ordinary],
    };
    for &m in which {
        let (path, snap, trained) = ensure_pretrained_modality(&cfg, &data, seed, m, &dir, force)?;
        let err = snap.metrics.get("accuracy").and_then(|v| v.as_f64());
        println!(
            "{}\t{}\t{}\teval_accuracy={}",
            if trained { "trained" } else { "exists" },
            serde_json::to_value(m).unwrap().as_str().unwrap_or(""),
            path.display(),
            err.map_or("NA".into(), |a| format!("{:.4}", a))
        );
    }
    Ok(())
}

struct TrainArgs {
    variant: Option<Variant>,
    seed: Option<u64>,
    resume: bool,
    force: bool,
    out: Option<PathBuf>,
    stop_after_epochs: Option<u64>,
}

fn cmd_train(config: &Path, a: TrainArgs) -> CliResult {
    let cfg = effective_config(&load_config(config)?, a.variant, a.seed)?;
    let pretrain_dir = cfg.run.output_root.join("pretrain").join(format!("seed{}", cfg.run.seed));
    let opts = RunOptions {
        out: Some(a.out.unwrap_or_else(|| default_run_dir(&cfg))),
        resume: a.resume,
        force: a.force,
        stop_after_epochs: a.stop_after_epochs,
        pretrain_dir: Some(pretrain_dir),
    };
    let outcome = run_experiment(&cfg, &opts)?;
    match outcome.status {
        RunStatus::Interrupted => println!("interrupted\t{}", outcome.dir.display()),
        status => {
            let s = outcome.summary.expect("finished runs carry a summary");
            let label = if status == RunStatus::AlreadyComplete { "exists" } else { "completed" };
            println!("{}\t{}\teval_error={:.6}", label, outcome.dir.display(), s.eval_error);
        }
    }
    Ok(())
}

fn cmd_ablate(
    config: &Path,
    seeds: Option<Vec<u64>>,
    with_two_stage: bool,
    variants: Option<Vec<Variant>>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult {
    let mut cfg = effective_config(&load_config(config)?, None, None)?;
    if let Some(w) = workers {
        cfg.run.workers = w.max(1);
    }
    let seeds = seeds.unwrap_or_else(|| cfg.run.seeds.clone());
    let out = out.unwrap_or_else(|| cfg.run.output_root.join(format!("ablation-{}", &cfg.digest()[..12])));
    let mut variants = variants.unwrap_or_else(|| Variant::ABLATION.to_vec());
    if with_two_stage && !variants.contains(&Variant::TwoStage) {
        variants.push(Variant::TwoStage);
    }
    let table = run_ablation(&cfg, &variants, &seeds, &out)?;
    for s in &table.stats {
        println!(
            "{}\tn={}\tmean_error={}\tstd={}",
            s.variant,
            s.n_ok,
            s.mean_error.map_or("NA".into(), |m| format!("{:.4}", m)),
            s.std_error.map_or("NA".into(), |m| format!("{:.4}", m))
        );
    }
    println!("table\t{}", table.table_path.display());
    let failed = table.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{} of {} runs failed; see the status column", failed, table.rows.len());
    }
    Ok(())
}

fn cmd_evaluate(run: &Path) -> CliResult {
    let m = evaluate_run(run)?;
    println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            modality,
            seed,
            force,
            out,
        } => cmd_pretrain(&config, modality, seed, force, out),
        Command::Train {
            config,
            variant,
            seed,
            resume,
            force,
            out,
            stop_after_epochs,
        } => cmd_train(
            &config,
            TrainArgs {
                variant,
                seed,
                resume,
                force,
                out,
                stop_after_epochs,
            },
        ),
        Command::Ablate {
            config,
            seeds,
            with_two_stage,
            variants,
            workers,
            out,
        } => cmd_ablate(&config, seeds, with_two_stage, variants, workers, out),
        Command::Evaluate { run } => cmd_evaluate(&run),
        Command::Plot { path, out } => plot::cmd_plot(&path, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
