//! Question-adaptive multi-head graph attention over region features.
//!
//! Every encoder concatenates `q` onto each region feature (`v'_i = [v_i ‖ q]`), runs `M`
//! attention heads of width `d_h / M`, concatenates them, projects back to `d_v` and adds
//! the input features as a residual.
//!
//! Parameter names, with `{p}` one of `imp`, `spa`, `sem` and `m` the head index:
//!
//! * implicit heads: `{p}.head{m}.U`, `.V`, `.W` (`(d_v+d_q) × d_h/M`), `.w` (`d_h × 1`)
//! * explicit heads: `{p}.head{m}.U`, `.V.out|in|self`, `.W.out|in|self`,
//!   `.b_lab` (`L × d_h/M`), `.c_lab` (`L`)
//! * output projection: `{p}.out.W` (`d_h × d_v`), `{p}.out.b`

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::NodeId;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::GeomFeature;
use crate::graph::{Direction, RegionSet, RelationGraph, RelationKind};
use crate::nn::{init_linear, join, Ctx};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn param_prefix(kind: RelationKind) -> &'static str {
    match kind {
        RelationKind::Implicit => "imp",
        RelationKind::Spatial => "spa",
        RelationKind::Semantic => "sem",
    }
}

pub fn head_prefix(kind: RelationKind, head: usize) -> String {
    format!("{}.head{head}", param_prefix(kind))
}

pub fn init_relation_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    let input = cfg.d_v + cfg.d_q;
    let hd = cfg.head_dim();
    for m in 0..cfg.heads {
        let p = head_prefix(cfg.kind, m);
        store.init_uniform(rng, &join(&p, "U"), input, hd);
        if cfg.kind.is_explicit() {
            for dir in Direction::ALL {
                store.init_uniform(rng, &format!("{p}.V.{}", dir.name()), input, hd);
                store.init_uniform(rng, &format!("{p}.W.{}", dir.name()), input, hd);
            }
            let labels = cfg.kind.label_count();
            store.init_zeros(&join(&p, "b_lab"), &[labels, hd]);
            store.init_zeros(&join(&p, "c_lab"), &[labels]);
        } else {
            store.init_uniform(rng, &join(&p, "V"), input, hd);
            store.init_uniform(rng, &join(&p, "W"), input, hd);
            store.init_uniform(rng, &join(&p, "w"), cfg.d_h, 1);
        }
    }
    init_linear(store, rng, &join(param_prefix(cfg.kind), "out"), cfg.d_h, cfg.d_v, true);
}

/// Per-sample constants derived from the graph: neighborhood and direction masks, edge
/// label indices, and (implicit) the embedded pairwise geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTensors {
    kind: RelationKind,
    k: usize,
    mask: Vec<bool>,
    dir_masks: [Tensor; 3],
    labels: Vec<Option<usize>>,
    uniform: Tensor,
    geometry: Option<Tensor>,
}

impl GraphTensors {
    pub fn new(graph: &RelationGraph, regions: &RegionSet, cfg: &ModelConfig) -> Result<Self> {
        let k = graph.vertex_count();
        if regions.len() != k {
            return Err(Error::Validation(format!(
                "graph has {k} vertices but the image has {} regions",
                regions.len()
            )));
        }
        if graph.kind() != cfg.kind {
            return Err(Error::Config(format!(
                "model is configured for {} relations but got a {} graph",
                cfg.kind,
                graph.kind()
            )));
        }
        let mask = graph.neighborhood_mask();
        let mut dir_masks = [Tensor::zeros(&[k, k]), Tensor::zeros(&[k, k]), Tensor::zeros(&[k, k])];
        let mut labels = vec![None; k * k];
        for i in 0..k {
            for n in graph.neighbors(i) {
                dir_masks[n.dir.index()].data_mut()[i * k + n.node] = 1.0;
                labels[i * k + n.node] = Some(n.label as usize);
            }
        }
        let mut uniform = vec![0.0; k * k];
        for i in 0..k {
            let row = &mask[i * k..(i + 1) * k];
            let n = row.iter().filter(|&&m| m).count() as f64;
            for j in 0..k {
                if row[j] {
                    uniform[i * k + j] = 1.0 / n;
                }
            }
        }
        let geometry = if graph.kind() == RelationKind::Implicit {
            let boxes = regions.boxes();
            let mut data = Vec::with_capacity(k * k * cfg.d_h);
            for bi in boxes {
                for bj in boxes {
                    data.extend(GeomFeature::new(bi, bj, cfg.log_eps, cfg.d_h)?.embedded);
                }
            }
            Some(Tensor::new(vec![k * k, cfg.d_h], data)?)
        } else {
            None
        };
        Ok(GraphTensors {
            kind: graph.kind(),
            k,
            mask,
            dir_masks,
            labels,
            uniform: Tensor::new(vec![k, k], uniform)?,
            geometry,
        })
    }

    pub fn kind(&self) -> RelationKind {
        self.kind
    }

    pub fn vertex_count(&self) -> usize {
        self.k
    }

    /// `K × K` row-major neighborhood membership.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// 0/1 matrix of the pairs `(i, j)` whose edge has direction `dir` from `i`'s side.
    pub fn dir_mask(&self, dir: Direction) -> &Tensor {
        &self.dir_masks[dir.index()]
    }

    /// Label index of pair `(i, j)` at `i·K + j`, `None` outside the neighborhood.
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// `K² × d_h` embedded relative geometry, row `i·K + j` for the pair `(i, j)`.
    pub fn geometry(&self) -> Option<&Tensor> {
        self.geometry.as_ref()
    }
}

/// `[v_i ‖ q]` for every row of `v` (`K × d_v`), with `q` a `1 × d_q` row.
pub fn concat_question(ctx: &mut Ctx, v: NodeId, q: NodeId) -> Result<NodeId> {
    let k = ctx.graph.shape(v)[0];
    let rep = ctx.repeat_rows(q, k)?;
    ctx.graph.concat(&[v, rep])
}

fn scaled_scores(ctx: &mut Ctx, left: NodeId, right: NodeId, hd: usize) -> Result<NodeId> {
    let rt = ctx.graph.transpose(right)?;
    let s = ctx.graph.matmul(left, rt)?;
    Ok(ctx.graph.scale(s, 1.0 / libm::sqrt(hd as f64)))
}

/// `α_ij ∝ max(0, w·f_b(b_i, b_j)) · exp((U v'_i)·(V v'_j) / sqrt(d_h/M))`, row-normalized.
pub fn implicit_attention_weights(ctx: &mut Ctx, vprime: NodeId, gt: &GraphTensors, head: &str, hd: usize) -> Result<NodeId> {
    let geometry = gt
        .geometry()
        .ok_or_else(|| Error::Contract("implicit attention needs the geometry table".into()))?;
    let u = ctx.param(&join(head, "U"))?;
    let v = ctx.param(&join(head, "V"))?;
    let w = ctx.param(&join(head, "w"))?;
    let ux = ctx.graph.matmul(vprime, u)?;
    let vx = ctx.graph.matmul(vprime, v)?;
    let logits = scaled_scores(ctx, ux, vx, hd)?;
    let g = ctx.constant(geometry.clone());
    let gw = ctx.graph.matmul(g, w)?;
    let gw = ctx.graph.relu(gw);
    let ab = ctx.graph.reshape(gw, &[gt.k, gt.k])?;
    ctx.graph.weighted_softmax(logits, ab)
}

/// `α_ij ∝ exp((U v'_i)·(V_dir(i,j) v'_j) / sqrt(d_h/M) + c_lab(i,j))` over `j ∈ N_i`.
pub fn explicit_attention_weights(ctx: &mut Ctx, vprime: NodeId, gt: &GraphTensors, head: &str, hd: usize) -> Result<NodeId> {
    if !gt.kind.is_explicit() {
        return Err(Error::Contract("explicit attention needs a spatial or semantic graph".into()));
    }
    let u = ctx.param(&join(head, "U"))?;
    let ux = ctx.graph.matmul(vprime, u)?;
    let mut logits = None;
    for dir in Direction::ALL {
        let v = ctx.param(&format!("{head}.V.{}", dir.name()))?;
        let vx = ctx.graph.matmul(vprime, v)?;
        let s = scaled_scores(ctx, ux, vx, hd)?;
        let s = ctx.graph.mul_const(s, gt.dir_mask(dir).clone())?;
        logits = Some(match logits {
            None => s,
            Some(acc) => ctx.graph.add(acc, s)?,
        });
    }
    let c = ctx.param(&join(head, "c_lab"))?;
    let bias = ctx.graph.gather(c, gt.labels.clone(), &[gt.k, gt.k])?;
    let logits = ctx.graph.add(logits.expect("three directions"), bias)?;
    ctx.graph.softmax_masked(logits, &gt.mask)
}

/// Implicit: `ReLU(α · W v')`. Explicit: `ReLU(Σ_j α_ij (W_dir(i,j) v'_j + b_lab(i,j)))`.
pub fn attention_aggregate(ctx: &mut Ctx, vprime: NodeId, alpha: NodeId, gt: &GraphTensors, head: &str) -> Result<NodeId> {
    let sum = if gt.kind.is_explicit() {
        let mut acc = None;
        for dir in Direction::ALL {
            let w = ctx.param(&format!("{head}.W.{}", dir.name()))?;
            let wx = ctx.graph.matmul(vprime, w)?;
            let a = ctx.graph.mul_const(alpha, gt.dir_mask(dir).clone())?;
            let term = ctx.graph.matmul(a, wx)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => ctx.graph.add(prev, term)?,
            });
        }
        let b = ctx.param(&join(head, "b_lab"))?;
        let per_label = ctx.graph.scatter_cols(alpha, gt.labels.clone(), gt.kind.label_count())?;
        let bias = ctx.graph.matmul(per_label, b)?;
        ctx.graph.add(acc.expect("three directions"), bias)?
    } else {
        let w = ctx.param(&join(head, "W"))?;
        let wx = ctx.graph.matmul(vprime, w)?;
        ctx.graph.matmul(alpha, wx)?
    };
    Ok(ctx.graph.relu(sum))
}

pub struct RelationOutput {
    /// `K × d_v` relation-aware features.
    pub vstar: NodeId,
    /// `K × K` attention of each head.
    pub attention: Vec<NodeId>,
}

/// Runs every head on `v' = [v ‖ q]`, concatenates the head outputs, projects them to `d_v`
/// and adds `v`.
pub fn encode_relations(ctx: &mut Ctx, cfg: &ModelConfig, v: NodeId, q: NodeId, gt: &GraphTensors) -> Result<RelationOutput> {
    cfg.validate()?;
    if gt.kind != cfg.kind {
        return Err(Error::Config(format!("{} encoder got a {} graph", cfg.kind, gt.kind)));
    }
    let shape = ctx.graph.shape(v).to_vec();
    if shape != [gt.k, cfg.d_v] || ctx.graph.shape(q) != [1, cfg.d_q] {
        return Err(Error::Dimension {
            op: "encode_relations",
            lhs: shape,
            rhs: ctx.graph.shape(q).to_vec(),
        });
    }
    let q = if cfg.ablation.question_adaptive {
        q
    } else {
        ctx.constant(Tensor::zeros(&[1, cfg.d_q]))
    };
    let vprime = concat_question(ctx, v, q)?;
    let vprime = ctx.dropout(vprime, cfg.dropout)?;
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let head = head_prefix(cfg.kind, m);
        let alpha = if !cfg.ablation.attention {
            ctx.constant(gt.uniform.clone())
        } else if gt.kind.is_explicit() {
            explicit_attention_weights(ctx, vprime, gt, &head, hd)?
        } else {
            implicit_attention_weights(ctx, vprime, gt, &head, hd)?
        };
        heads.push(attention_aggregate(ctx, vprime, alpha, gt, &head)?);
        attention.push(alpha);
    }
    let joined = ctx.graph.concat(&heads)?;
    let joined = ctx.dropout(joined, cfg.dropout)?;
    let proj = ctx.linear(joined, &join(param_prefix(cfg.kind), "out"), true)?;
    let vstar = ctx.graph.add(proj, v)?;
    Ok(RelationOutput { vstar, attention })
}
