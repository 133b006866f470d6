//! The operations behind each subcommand, callable without the argument parser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regat_core::config::ModelConfig;
use regat_core::fusion::{ensemble, vqa_accuracy, AnswerDistribution, EnsembleWeights};
use regat_core::geometry::BBox;
use regat_core::graph::{RegionSet, RelationGraph, RelationKind};
use regat_core::model::{build_graph, forward, gradcheck_pipeline, init_params, Sample, DEFAULT_PIPELINE_STEP};
use regat_core::nn::Ctx;
use regat_core::train::{TrainReport, Trainer};
use regat_core::{GradCheckReport, OpKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{read_json, read_jsonl, to_samples, write_json, write_jsonl, Record, Vocab};
use crate::error::{Error, Result};
use crate::synth::{generate, SynthSpec};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const METRICS_FILE: &str = "metrics.csv";
/// Pipeline gradients must agree with finite differences to this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const TOP_K: usize = 5;

// ---- extract-graph ----

/// Input of `extract-graph`: boxes and, for semantic graphs, triples.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxesFile {
    pub boxes: Vec<[f64; 4]>,
    #[serde(default)]
    pub triples: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub kind: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// `[src, dst, label, dir]`
    pub edges: Vec<(usize, usize, u8, String)>,
}

impl GraphDump {
    pub fn new(graph: &RelationGraph) -> Self {
        GraphDump {
            kind: graph.kind().name().to_string(),
            k: graph.vertex_count(),
            edges: graph
                .edges()
                .iter()
                .map(|e| (e.src, e.dst, e.label, e.dir.name().to_string()))
                .collect(),
        }
    }
}

pub fn extract_graph(input: &BoxesFile, kind: RelationKind, far_threshold: f64) -> Result<GraphDump> {
    let boxes = input
        .boxes
        .iter()
        .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
        .collect::<regat_core::Result<Vec<_>>>()?;
    let regions = RegionSet::new(Tensor::zeros(&[boxes.len(), 1]), boxes)?;
    let record = Record {
        question_id: String::new(),
        tokens: Vec::new(),
        boxes: input.boxes.clone(),
        features: Vec::new(),
        triples: input.triples.clone(),
        answers: BTreeMap::new(),
    };
    let graph = build_graph(kind, &regions, &record.semantic_triples()?, far_threshold)?;
    Ok(GraphDump::new(&graph))
}

// ---- generate ----

pub fn generate_files(spec: &SynthSpec, out_dir: &Path) -> Result<(usize, usize)> {
    let (train, val) = generate(spec)?;
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    write_jsonl(&out_dir.join("train.jsonl"), &train)?;
    write_jsonl(&out_dir.join("val.jsonl"), &val)?;
    Ok((train.len(), val.len()))
}

// ---- train ----

fn data_path(cfg: &RunConfig, which: &str) -> Result<Option<PathBuf>> {
    Ok(match which {
        "train" => Some(
            cfg.data
                .train
                .clone()
                .ok_or_else(|| Error::Validation("data.train is required for training".into()))?,
        ),
        _ => cfg.data.val.clone(),
    })
}

/// Trains one relation model and writes the run directory: the best checkpoint, the resolved
/// config, the vocabulary and the per-epoch metrics.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let train_records = read_jsonl(&data_path(cfg, "train")?.expect("required"))?;
    if train_records.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let val_records = match data_path(cfg, "val")? {
        Some(p) => read_jsonl(&p)?,
        None => Vec::new(),
    };
    let vocab = Vocab::build(&train_records);
    let model = cfg.model_config(cfg.model.kind, vocab.tokens.len(), vocab.answers.len())?;
    let train_set = to_samples(&train_records, &vocab, &model, cfg.model.max_regions)?;
    let val_set = to_samples(&val_records, &vocab, &model, cfg.model.max_regions)?;
    let tc = cfg.train_config()?;

    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    write_json(&out_dir.join(VOCAB_FILE), &vocab)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    metrics.write_record(["epoch", "loss", "train_acc", "val_acc", "lr"])?;

    let params = init_params(&model, tc.seed)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let mut io_error = None;
    let report = Trainer::new(&model, tc, params)?.fit(&train_set, &val_set, |m, params, best| {
        let row = [
            m.epoch.to_string(),
            m.loss.to_string(),
            m.train_acc.to_string(),
            m.val_acc.map_or_else(String::new, |v| v.to_string()),
            m.lr.to_string(),
        ];
        let res = metrics
            .write_record(&row)
            .and_then(|_| metrics.flush().map_err(csv::Error::from))
            .map_err(Error::from)
            .and_then(|_| if best { checkpoint::save(&ckpt, params) } else { Ok(()) });
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if let Some(why) = &report.aborted {
        return Err(Error::CheckFailed(format!("training aborted ({why}); last good checkpoint kept")));
    }
    Ok(report)
}

// ---- loading trained runs ----

/// A trained model with everything needed to read new data.
pub struct LoadedModel {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

/// Loads a checkpoint together with the config and vocabulary stored next to it.
pub fn load_model(checkpoint_path: &Path) -> Result<LoadedModel> {
    let dir = checkpoint_path.parent().unwrap_or(Path::new("."));
    let run: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    run.validate()?;
    let vocab: Vocab = read_json(&dir.join(VOCAB_FILE))?;
    vocab.validate()?;
    let model = run.model_config(run.model.kind, vocab.tokens.len(), vocab.answers.len())?;
    let params = checkpoint::load(checkpoint_path)?;
    checkpoint::check_compatible(&params, &init_params(&model, 0)?)
        .map_err(|e| Error::Validation(format!("{}: {e}", checkpoint_path.display())))?;
    Ok(LoadedModel { run, model, vocab, params })
}

impl LoadedModel {
    pub fn samples(&self, records: &[Record]) -> Result<Vec<Sample>> {
        to_samples(records, &self.vocab, &self.model, self.run.model.max_regions)
    }

    /// Eval-mode answer distributions, one per record.
    pub fn distributions(&self, records: &[Record]) -> Result<Vec<AnswerDistribution>> {
        let samples = self.samples(records)?;
        samples
            .iter()
            .map(|s| Ok(regat_core::model::answer_distribution(&self.params, &self.model, s)?))
            .collect()
    }
}

// ---- eval ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    pub probs_topk: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy of each model on its own.
    pub per_model: BTreeMap<String, f64>,
    /// Ensemble weights used, when three models were given.
    pub weights: Option<(f64, f64)>,
    pub predictions: Vec<Prediction>,
}

/// How to combine three models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Fixed(f64, f64),
    /// Every `(α, β)` on a grid of this spacing over the simplex, keeping the most accurate.
    Grid(f64),
}

fn accuracy(dists: &[AnswerDistribution], records: &[Record], vocab: &Vocab) -> f64 {
    let total: f64 = dists
        .iter()
        .zip(records)
        .map(|(d, r)| {
            let counts: BTreeMap<usize, u32> = r.answers.iter().filter_map(|(a, &n)| Some((vocab.answer_id(a)?, n))).collect();
            vqa_accuracy(d.argmax(), &counts)
        })
        .sum();
    total / records.len().max(1) as f64
}

fn predictions(dists: &[AnswerDistribution], records: &[Record], vocab: &Vocab) -> Vec<Prediction> {
    dists
        .iter()
        .zip(records)
        .map(|(d, r)| Prediction {
            question_id: r.question_id.clone(),
            answer: vocab.answers[d.argmax()].clone(),
            probs_topk: d.top_k(TOP_K).into_iter().map(|(i, p)| (vocab.answers[i].clone(), p)).collect(),
        })
        .collect()
}

/// The `(α, β)` grid over the simplex, vertices included.
pub fn weight_grid(step: f64) -> Result<Vec<(f64, f64)>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Validation(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    let mut out = Vec::new();
    for a in 0..=n {
        for b in 0..=(n - a) {
            out.push((a as f64 / n as f64, b as f64 / n as f64));
        }
    }
    Ok(out)
}

/// Evaluates one model, or an ensemble of one model per relation kind.
pub fn evaluate(models: &[LoadedModel], records: &[Record], weighting: Weighting) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    match models {
        [m] => {
            let dists = m.distributions(records)?;
            let acc = accuracy(&dists, records, &m.vocab);
            Ok(EvalReport {
                accuracy: acc,
                per_model: [(m.model.kind.name().to_string(), acc)].into_iter().collect(),
                weights: None,
                predictions: predictions(&dists, records, &m.vocab),
            })
        }
        [_, _, _] => {
            let by_kind = |k: RelationKind| {
                models
                    .iter()
                    .find(|m| m.model.kind == k)
                    .ok_or_else(|| Error::Validation(format!("ensemble needs one {k} model")))
            };
            let (sem, spa, imp) = (by_kind(RelationKind::Semantic)?, by_kind(RelationKind::Spatial)?, by_kind(RelationKind::Implicit)?);
            if sem.vocab.answers != spa.vocab.answers || sem.vocab.answers != imp.vocab.answers {
                return Err(Error::Validation("ensemble models were trained with different answer vocabularies".into()));
            }
            let (ds, dp, di) = (sem.distributions(records)?, spa.distributions(records)?, imp.distributions(records)?);
            let vocab = &sem.vocab;
            let per_model = [(sem, &ds), (spa, &dp), (imp, &di)]
                .iter()
                .map(|(m, d)| (m.model.kind.name().to_string(), accuracy(d, records, vocab)))
                .collect();
            let combine = |w: EnsembleWeights| -> Result<Vec<AnswerDistribution>> {
                (0..records.len()).map(|i| Ok(ensemble(&ds[i], &dp[i], &di[i], w)?)).collect()
            };
            let candidates = match weighting {
                Weighting::Fixed(a, b) => vec![(a, b)],
                Weighting::Grid(step) => weight_grid(step)?,
            };
            let mut best: Option<(f64, (f64, f64), Vec<AnswerDistribution>)> = None;
            for (a, b) in candidates {
                let dists = combine(EnsembleWeights::new(a, b)?)?;
                let acc = accuracy(&dists, records, vocab);
                if best.as_ref().map_or(true, |(x, _, _)| acc > *x) {
                    best = Some((acc, (a, b), dists));
                }
            }
            let (acc, w, dists) = best.expect("at least one weighting");
            Ok(EvalReport {
                accuracy: acc,
                per_model,
                weights: Some(w),
                predictions: predictions(&dists, records, vocab),
            })
        }
        _ => Err(Error::Validation(format!("eval takes 1 or 3 checkpoints, got {}", models.len()))),
    }
}

// ---- gradcheck ----

#[derive(Debug, Clone, PartialEq)]
pub struct KindCheck {
    pub kind: RelationKind,
    pub report: GradCheckReport,
}

/// A random toy instance with `regions` regions and `answers` answers.
pub fn toy_sample(cfg: &ModelConfig, regions: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = (0..regions * cfg.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let boxes = (0..regions)
        .map(|_| BBox::new(rng.gen_range(0..200) as f64, rng.gen_range(0..200) as f64, rng.gen_range(20..120) as f64, rng.gen_range(20..120) as f64))
        .collect::<regat_core::Result<Vec<_>>>()?;
    let set = RegionSet::new(Tensor::matrix(regions, cfg.d_v, feats)?, boxes)?;
    let mut triples = Vec::new();
    for s in 0..regions {
        let o = (s + 1 + rng.gen_range(0..regions.max(2) - 1)) % regions;
        if o != s {
            triples.push(regat_core::graph::SemanticTriple {
                subject: s,
                predicate: rng.gen_range(1..=regat_core::graph::SEMANTIC_LABELS) as u8,
                object: o,
            });
        }
    }
    let tokens: Vec<usize> = (0..rng.gen_range(3..=cfg.max_len)).map(|_| rng.gen_range(2..cfg.vocab_size)).collect();
    let answers = [(rng.gen_range(0..cfg.num_answers), 3), (rng.gen_range(0..cfg.num_answers), 2)].into_iter().collect();
    Ok(Sample::new(cfg, "toy".into(), &tokens, set, &triples, answers)?)
}

/// Finite-difference check of the full pipeline for each relation kind, dropout off.
pub fn gradcheck_all(cfg: &RunConfig, regions: usize, answers: usize, vocab_size: usize, fault: Option<OpKind>) -> Result<Vec<KindCheck>> {
    let handles: Vec<_> = RelationKind::ALL
        .into_iter()
        .map(|kind| {
            let cfg = cfg.clone();
            std::thread::spawn(move || -> Result<KindCheck> {
                let model = cfg.model_config(kind, vocab_size, answers)?;
                let params = init_params(&model, cfg.train.seed)?;
                let sample = toy_sample(&model, regions, cfg.train.seed.wrapping_add(1))?;
                let report = gradcheck_pipeline(&params, &model, &sample, DEFAULT_PIPELINE_STEP, fault)?;
                Ok(KindCheck { kind, report })
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().expect("gradcheck thread panicked")).collect()
}

// ---- dump-attention ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionDump {
    pub question_id: String,
    pub kind: String,
    pub tokens: Vec<String>,
    /// Question self-attention over real tokens.
    pub question: Vec<f64>,
    /// One `K × K` matrix per head, rows summing to one.
    pub relation: Vec<Vec<Vec<f64>>>,
    /// Fusion attention over regions.
    pub fusion: Vec<f64>,
    pub answer: String,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn dump_attention(m: &LoadedModel, record: &Record) -> Result<AttentionDump> {
    let sample = m.samples(std::slice::from_ref(record))?.remove(0);
    let mut ctx = Ctx::eval(&m.params);
    let out = forward(&mut ctx, &m.model, &sample)?;
    let g = &ctx.graph;
    let n_tokens = sample.tokens.real_tokens();
    let dist = AnswerDistribution::from_logits(g.value(out.logits).data())?;
    Ok(AttentionDump {
        question_id: record.question_id.clone(),
        kind: m.model.kind.name().to_string(),
        tokens: record.tokens.iter().take(n_tokens).cloned().collect(),
        question: g.value(out.question_weights).data()[..n_tokens].to_vec(),
        relation: out.relation_attention.iter().map(|&a| rows(g.value(a))).collect(),
        fusion: g.value(out.fusion_attention).data().to_vec(),
        answer: m.vocab.answers[dist.argmax()].clone(),
    })
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_jsonl(path, preds)
}
