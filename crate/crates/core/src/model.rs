//! One relation model end to end: question encoder, relation encoder, fusion and classifier.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, OpKind};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{bce_loss, fuse_butd, init_fusion, predict, soft_targets, AnswerDistribution};
use crate::gradcheck::{gradcheck, GradCheckReport};
use crate::graph::{build_implicit, build_semantic, build_spatial, RegionSet, RelationGraph, RelationKind, SemanticTriple};
use crate::nn::{enable_weight_norm, join, Ctx};
use crate::params::ParamStore;
use crate::question::{encode_question, init_question_encoder, TokenSequence};
use crate::relation::{encode_relations, init_relation_encoder, param_prefix, GraphTensors};
use crate::tensor::Tensor;

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_question_encoder(&mut store, &mut rng, cfg);
    init_relation_encoder(&mut store, &mut rng, cfg);
    init_fusion(&mut store, &mut rng, cfg);
    if cfg.weight_norm {
        for prefix in ["fuse.v", "fuse.q", "fuse.vt", "fuse.qt", "cls.0", "cls.1"] {
            enable_weight_norm(&mut store, prefix)?;
        }
        enable_weight_norm(&mut store, &join(param_prefix(cfg.kind), "out"))?;
    }
    Ok(store)
}

/// The relation graph of `kind` over `regions`.
pub fn build_graph(kind: RelationKind, regions: &RegionSet, triples: &[SemanticTriple], far_threshold: f64) -> Result<RelationGraph> {
    match kind {
        RelationKind::Implicit => Ok(build_implicit(regions)),
        RelationKind::Spatial => build_spatial(regions, far_threshold),
        RelationKind::Semantic => build_semantic(regions, triples),
    }
}

/// An example prepared for one relation model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub question_id: String,
    pub tokens: TokenSequence,
    pub regions: RegionSet,
    pub graph: RelationGraph,
    pub graph_tensors: GraphTensors,
    /// Human answer counts by answer index.
    pub answers: BTreeMap<usize, u32>,
    pub targets: Tensor,
}

impl Sample {
    pub fn new(
        cfg: &ModelConfig,
        question_id: String,
        token_ids: &[usize],
        regions: RegionSet,
        triples: &[SemanticTriple],
        answers: BTreeMap<usize, u32>,
    ) -> Result<Self> {
        if regions.feature_dim() != cfg.d_v {
            return Err(Error::Validation(alloc::format!(
                "question {question_id}: region features have {} dims, model expects d_v = {}",
                regions.feature_dim(),
                cfg.d_v
            )));
        }
        let graph = build_graph(cfg.kind, &regions, triples, cfg.far_threshold)?;
        let graph_tensors = GraphTensors::new(&graph, &regions, cfg)?;
        let targets = soft_targets(&answers, cfg.num_answers)?;
        Ok(Sample {
            question_id,
            tokens: TokenSequence::new(token_ids, cfg.max_len),
            regions,
            graph,
            graph_tensors,
            answers,
            targets,
        })
    }
}

pub struct ForwardOutput {
    /// `1 × |A|`
    pub logits: NodeId,
    /// Question self-attention over token positions.
    pub question_weights: NodeId,
    /// `K × K` relation attention per head.
    pub relation_attention: Vec<NodeId>,
    /// Fusion attention over regions.
    pub fusion_attention: NodeId,
}

pub fn forward(ctx: &mut Ctx, cfg: &ModelConfig, sample: &Sample) -> Result<ForwardOutput> {
    let q = encode_question(ctx, cfg, &sample.tokens)?;
    let v = ctx.constant(sample.regions.features().clone());
    let rel = encode_relations(ctx, cfg, v, q.q, &sample.graph_tensors)?;
    let fused = fuse_butd(ctx, cfg, rel.vstar, q.q)?;
    let logits = predict(ctx, cfg, fused.joint)?;
    Ok(ForwardOutput {
        logits,
        question_weights: q.weights,
        relation_attention: rel.attention,
        fusion_attention: fused.attention,
    })
}

/// Eval-mode answer scores for one sample.
pub fn answer_distribution(params: &ParamStore, cfg: &ModelConfig, sample: &Sample) -> Result<AnswerDistribution> {
    let mut ctx = Ctx::eval(params);
    let out = forward(&mut ctx, cfg, sample)?;
    AnswerDistribution::from_logits(ctx.graph.value(out.logits).data())
}

/// Graph holding the mean BCE loss of `samples` under `params`.
pub fn loss_graph(params: &ParamStore, cfg: &ModelConfig, samples: &[&Sample], dropout_seed: Option<u64>) -> Result<(Graph, NodeId)> {
    if samples.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut ctx = match dropout_seed {
        Some(seed) => Ctx::train(params, seed),
        None => Ctx::eval(params),
    };
    let mut total = None;
    for s in samples {
        let out = forward(&mut ctx, cfg, s)?;
        let l = bce_loss(&mut ctx, out.logits, &s.targets)?;
        total = Some(match total {
            None => l,
            Some(t) => ctx.graph.add(t, l)?,
        });
    }
    let loss = ctx.graph.scale(total.expect("non-empty batch"), 1.0 / samples.len() as f64);
    Ok((ctx.graph, loss))
}

/// Central-difference step for whole-pipeline checks. Many gradients of the full model are
/// around 1e-8, where round-off in smaller steps swamps the comparison.
pub const DEFAULT_PIPELINE_STEP: f64 = 1e-3;

/// Finite-difference check of the whole pipeline down to the BCE loss of `sample`.
pub fn gradcheck_pipeline(params: &ParamStore, cfg: &ModelConfig, sample: &Sample, step: f64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    gradcheck(|p| loss_graph(p, cfg, &[sample], None), params, step, fault)
}
