use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regat::commands::{self, BoxesFile, Weighting, GRADCHECK_TOLERANCE};
use regat::config::RunConfig;
use regat::data::{read_json, read_jsonl, write_json};
use regat::synth::SynthSpec;
use regat::{Error, Result};
use regat_core::graph::RelationKind;
use regat_core::OpKind;

/// Relation-aware graph attention for visual question answering.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=30`. Repeatable; later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a relation graph from a boxes file and print it as JSON.
    ExtractGraph {
        /// JSON file `{"boxes": [[x, y, w, h], ...], "triples": [[i, p, j], ...]}`.
        boxes: PathBuf,
        /// implicit, spatial or semantic.
        #[arg(long)]
        kind: RelationKind,
        /// Spatial no-relation threshold (center distance over the square root of the larger box area).
        #[arg(long, default_value_t = regat_core::geometry::DEFAULT_FAR_THRESHOLD)]
        far_threshold: f64,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset (train.jsonl and val.jsonl).
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training examples.
        #[arg(long, default_value_t = 600)]
        n: usize,
        /// Validation examples.
        #[arg(long, default_value_t = 150)]
        n_val: usize,
        /// Scene kinds to include, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = RelationKind::ALL.map(|k| k.name().to_string()))]
        kinds: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one relation model and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Relation kind; overrides model.kind.
        #[arg(long)]
        kind: Option<RelationKind>,
        /// Training data; overrides data.train.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation data; overrides data.val.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score one checkpoint, or an ensemble of three (one per relation kind).
    Eval {
        /// checkpoint.json inside a run directory; give 1 or 3.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// JSON-lines dataset to score.
        #[arg(long)]
        data: PathBuf,
        /// Semantic weight; defaults to ensemble.alpha of the first run's config.
        #[arg(long)]
        alpha: Option<f64>,
        /// Spatial weight; defaults to ensemble.beta of the first run's config.
        #[arg(long)]
        beta: Option<f64>,
        /// Search α and β on a grid of this spacing instead.
        #[arg(long, conflicts_with_all = ["alpha", "beta"])]
        grid: Option<f64>,
        /// Prediction dump (JSON lines).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the full pipeline, every relation kind.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Regions in the toy instance.
        #[arg(long, default_value_t = 5)]
        regions: usize,
        /// Answer vocabulary size of the toy model.
        #[arg(long, default_value_t = 8)]
        answers: usize,
        /// Token vocabulary size of the toy model.
        #[arg(long, default_value_t = 12)]
        vocab: usize,
        /// Corrupt the backward rule of one operation (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write every attention map of one question as JSON.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Question to dump; defaults to the first.
        #[arg(long)]
        question_id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractGraph { boxes, kind, far_threshold, out } => {
            let input: BoxesFile = read_json(&boxes)?;
            let dump = commands::extract_graph(&input, kind, far_threshold)?;
            let text = serde_json::to_string(&dump).expect("serializable");
            match out {
                Some(p) => std::fs::write(&p, text + "\n").map_err(|source| Error::Io { path: p, source }),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        Command::Generate { seed, n, n_val, kinds, out_dir } => {
            let kinds = kinds.iter().map(|k| k.parse()).collect::<regat_core::Result<Vec<RelationKind>>>()?;
            let spec = SynthSpec { seed, train: n, val: n_val, kinds };
            let (a, b) = commands::generate_files(&spec, &out_dir)?;
            println!("wrote {a} training and {b} validation examples to {}", out_dir.display());
            Ok(())
        }
        Command::Train { cfg, kind, train, val, seed, epochs, out_dir } => {
            let mut extra = Vec::new();
            let json = |s: &str| serde_json::to_string(s).expect("serializable");
            if let Some(k) = kind {
                extra.push(format!("model.kind={}", json(k.name())));
            }
            if let Some(p) = &train {
                extra.push(format!("data.train={}", json(&p.display().to_string())));
            }
            if let Some(p) = &val {
                extra.push(format!("data.val={}", json(&p.display().to_string())));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            let cfg = cfg.load(extra)?;
            let report = commands::train(&cfg, &out_dir)?;
            let last = report.metrics.last();
            println!(
                "trained {} model for {} epochs; best epoch {}; final train_acc {:.4}; run directory {}",
                cfg.model.kind,
                report.metrics.len(),
                report.best_epoch.map_or("-".into(), |e| e.to_string()),
                last.map_or(0.0, |m| m.train_acc),
                out_dir.display()
            );
            Ok(())
        }
        Command::Eval { checkpoints, data, alpha, beta, grid, predictions } => {
            let models = checkpoints.iter().map(|p| commands::load_model(p)).collect::<Result<Vec<_>>>()?;
            let records = read_jsonl(&data)?;
            let weighting = match grid {
                Some(step) => Weighting::Grid(step),
                None => {
                    let e = &models[0].run.ensemble;
                    Weighting::Fixed(alpha.unwrap_or(e.alpha), beta.unwrap_or(e.beta))
                }
            };
            let report = commands::evaluate(&models, &records, weighting)?;
            if let Some(p) = &predictions {
                commands::write_predictions(p, &report.predictions)?;
            }
            for (kind, acc) in &report.per_model {
                println!("{kind}: {acc:.4}");
            }
            if let Some((a, b)) = report.weights {
                println!("ensemble alpha={a} beta={b}: {:.4}", report.accuracy);
            } else {
                println!("accuracy: {:.4}", report.accuracy);
            }
            Ok(())
        }
        Command::Gradcheck { cfg, regions, answers, vocab, fault } => {
            let cfg = cfg.load(Vec::new())?;
            let fault = match fault {
                Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| Error::Validation(format!("unknown operation `{name}`")))?),
                None => None,
            };
            let checks = commands::gradcheck_all(&cfg, regions, answers, vocab, fault)?;
            let mut worst: f64 = 0.0;
            for c in &checks {
                println!(
                    "{}: max_rel_err {:.3e} over {} coordinates ({} skipped at ReLU kinks)",
                    c.kind, c.report.max_rel_err, c.report.checked, c.report.skipped_near_kink
                );
                for (name, err) in &c.report.per_param_err {
                    println!("  {name} {err:.3e}");
                }
                worst = worst.max(c.report.max_rel_err);
            }
            if worst.is_nan() || worst > GRADCHECK_TOLERANCE {
                return Err(Error::CheckFailed(format!("gradient check failed: max_rel_err {worst:.3e} > {GRADCHECK_TOLERANCE:e}")));
            }
            println!("gradient check passed: max_rel_err {worst:.3e}");
            Ok(())
        }
        Command::DumpAttention { checkpoint, data, question_id, out } => {
            let model = commands::load_model(&checkpoint)?;
            let records = read_jsonl(&data)?;
            let record = match &question_id {
                Some(id) => records.iter().find(|r| &r.question_id == id),
                None => records.first(),
            }
            .ok_or_else(|| Error::Validation(format!("question {} not found in {}", question_id.as_deref().unwrap_or("<first>"), data.display())))?;
            emit(out.as_deref(), &commands::dump_attention(&model, record)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
