//! Question-guided fusion of relation-aware features, the answer classifier, and the
//! inference-time ensemble of the three relation models.
//!
//! Parameters: `fuse.v`, `fuse.q` (attention projections to `d_j`), `fuse.att.w`
//! (`d_j × 1`), `fuse.vt`, `fuse.qt` (joint projections), `cls.0` (`d_j × hidden`) and
//! `cls.1` (`hidden × |A|`).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{sigmoid, NodeId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_linear, Ctx};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn init_fusion<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    init_linear(store, rng, "fuse.v", cfg.d_v, cfg.d_j, true);
    init_linear(store, rng, "fuse.q", cfg.d_q, cfg.d_j, true);
    store.init_uniform(rng, "fuse.att.w", cfg.d_j, 1);
    init_linear(store, rng, "fuse.vt", cfg.d_v, cfg.d_j, true);
    init_linear(store, rng, "fuse.qt", cfg.d_q, cfg.d_j, true);
    init_linear(store, rng, "cls.0", cfg.d_j, cfg.classifier_hidden, true);
    init_linear(store, rng, "cls.1", cfg.classifier_hidden, cfg.num_answers, true);
}

pub struct FusionOutput {
    /// `1 × d_j`
    pub joint: NodeId,
    /// Attention over the `K` regions, `[K]`.
    pub attention: NodeId,
}

/// Top-down attention over the rows of `vstar` (`K × d_v`) guided by `q` (`1 × d_q`):
/// `s_i = w · (ReLU(P_v v*_i) ⊙ ReLU(P_q q))`, `ṽ = Σ softmax(s)_i v*_i`,
/// `J = ReLU(P'_v ṽ) ⊙ ReLU(P'_q q)`.
pub fn fuse_butd(ctx: &mut Ctx, cfg: &ModelConfig, vstar: NodeId, q: NodeId) -> Result<FusionOutput> {
    let k = ctx.graph.shape(vstar)[0];
    let vd = ctx.dropout(vstar, cfg.dropout)?;
    let qd = ctx.dropout(q, cfg.dropout)?;
    let pv = ctx.linear(vd, "fuse.v", true)?;
    let pv = ctx.graph.relu(pv);
    let pq = ctx.linear(qd, "fuse.q", true)?;
    let pq = ctx.graph.relu(pq);
    let pq = ctx.repeat_rows(pq, k)?;
    let joint = ctx.graph.mul(pv, pq)?;
    let w = ctx.param("fuse.att.w")?;
    let scores = ctx.graph.matmul(joint, w)?;
    let scores = ctx.graph.reshape(scores, &[k])?;
    let attention = ctx.graph.softmax_masked(scores, &vec![true; k])?;
    let row = ctx.graph.reshape(attention, &[1, k])?;
    let attended = ctx.graph.matmul(row, vstar)?;
    let attended = ctx.dropout(attended, cfg.dropout)?;
    let jv = ctx.linear(attended, "fuse.vt", true)?;
    let jv = ctx.graph.relu(jv);
    let jq = ctx.linear(qd, "fuse.qt", true)?;
    let jq = ctx.graph.relu(jq);
    let joint = ctx.graph.mul(jv, jq)?;
    Ok(FusionOutput { joint, attention })
}

/// Two-layer classifier; returns `1 × |A|` logits.
pub fn predict(ctx: &mut Ctx, cfg: &ModelConfig, joint: NodeId) -> Result<NodeId> {
    let h = ctx.linear(joint, "cls.0", true)?;
    let h = ctx.graph.relu(h);
    let h = ctx.dropout(h, cfg.classifier_dropout)?;
    ctx.linear(h, "cls.1", true)
}

/// Mean binary cross entropy over answers.
pub fn bce_loss(ctx: &mut Ctx, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let t = targets.reshaped(ctx.graph.shape(logits))?;
    ctx.graph.bce_with_logits(logits, t)
}

/// `min(1, count / 3)` per answer index.
pub fn soft_targets(counts: &BTreeMap<usize, u32>, num_answers: usize) -> Result<Tensor> {
    let mut t = vec![0.0; num_answers];
    for (&a, &c) in counts {
        let slot = t
            .get_mut(a)
            .ok_or_else(|| Error::Validation(format!("answer index {a} outside 0..{num_answers}")))?;
        *slot = (c as f64 / 3.0).min(1.0);
    }
    Tensor::new(vec![1, num_answers], t)
}

/// `min(1, #humans who gave the predicted answer / 3)`.
pub fn vqa_accuracy(pred: usize, counts: &BTreeMap<usize, u32>) -> f64 {
    (counts.get(&pred).copied().unwrap_or(0) as f64 / 3.0).min(1.0)
}

/// Per-answer scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("answer distribution is empty".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("answer scores must lie in [0, 1]".into()));
        }
        Ok(AnswerDistribution { probs })
    }

    /// Sigmoid scores of classifier logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(logits.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Scores divided by their sum. All-zero scores normalize to uniform.
    pub fn normalized(&self) -> Self {
        let s: f64 = self.probs.iter().sum();
        let n = self.probs.len() as f64;
        let probs = if s > 0.0 {
            self.probs.iter().map(|p| p / s).collect()
        } else {
            vec![1.0 / n; self.probs.len()]
        };
        AnswerDistribution { probs }
    }

    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// The `k` best `(answer, score)` pairs, best first, ties by lowest index.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i, self.probs[i])).collect()
    }
}

/// Mixing weights `α` (semantic) and `β` (spatial); implicit gets `1 − α − β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleWeights {
    alpha: f64,
    beta: f64,
}

impl EnsembleWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&alpha) && (0.0..=1.0).contains(&beta) && alpha + beta <= 1.0 + 1e-12;
        if !ok {
            return Err(Error::Validation(format!(
                "ensemble weights alpha = {alpha}, beta = {beta} need 0 <= alpha, beta and alpha + beta <= 1"
            )));
        }
        Ok(EnsembleWeights { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn implicit(&self) -> f64 {
        (1.0 - self.alpha - self.beta).max(0.0)
    }
}

/// `α·sem + β·spa + (1 − α − β)·imp` over the normalized inputs.
pub fn ensemble(
    sem: &AnswerDistribution,
    spa: &AnswerDistribution,
    imp: &AnswerDistribution,
    w: EnsembleWeights,
) -> Result<AnswerDistribution> {
    if sem.len() != spa.len() || sem.len() != imp.len() {
        return Err(Error::Validation(format!(
            "ensemble inputs have {}, {} and {} answers",
            sem.len(),
            spa.len(),
            imp.len()
        )));
    }
    let (sem, spa, imp) = (sem.normalized(), spa.normalized(), imp.normalized());
    let probs = (0..sem.len())
        .map(|a| (w.alpha * sem.probs[a] + w.beta * spa.probs[a] + w.implicit() * imp.probs[a]).clamp(0.0, 1.0))
        .collect();
    Ok(AnswerDistribution { probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::graph::RelationKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(RelationKind::Spatial, 10, 3, 4);
        c.d_q = 2;
        c.d_j = 5;
        c.classifier_hidden = 6;
        c
    }

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_fusion(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), &cfg());
        s
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // 1 − σ(z) is taken as σ(−z); subtracting from 1 would cancel for large z.
    fn naive_bce(z: f64, t: f64) -> f64 {
        let p = 1.0 / (1.0 + (-z).exp());
        let not_p = 1.0 / (1.0 + z.exp());
        -(t * p.ln() + (1.0 - t) * not_p.ln())
    }

    #[test]
    fn single_region_gets_all_attention() {
        let s = store(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3, 7] {
            let mut ctx = Ctx::eval(&s);
            let v = ctx.constant(rand_matrix(&mut rng, k, 3));
            let q = ctx.constant(rand_matrix(&mut rng, 1, 2));
            let out = fuse_butd(&mut ctx, &cfg(), v, q).unwrap();
            assert_eq!(ctx.graph.shape(out.joint), &[1, 5]);
            let att = ctx.graph.value(out.attention).data();
            assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if k == 1 {
                assert_eq!(att, &[1.0]);
            }
            let logits = predict(&mut ctx, &cfg(), out.joint).unwrap();
            assert_eq!(ctx.graph.shape(logits), &[1, 4]);
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let s = store(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_matrix(&mut rng, 4, 3);
        let q = rand_matrix(&mut rng, 1, 2);
        let targets = Tensor::matrix(1, 4, vec![0.0, 1.0 / 3.0, 1.0, 0.0]).unwrap();
        let f = |p: &ParamStore| {
            let mut ctx = Ctx::eval(p);
            let vn = ctx.constant(v.clone());
            let qn = ctx.constant(q.clone());
            let out = fuse_butd(&mut ctx, &cfg(), vn, qn)?;
            let logits = predict(&mut ctx, &cfg(), out.joint)?;
            let loss = bce_loss(&mut ctx, logits, &targets)?;
            Ok((ctx.graph, loss))
        };
        let r = gradcheck(f, &s, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn bce_at_zero_logits_is_log_two() {
        let s = ParamStore::new();
        let mut ctx = Ctx::eval(&s);
        let z = ctx.constant(Tensor::zeros(&[1, 6]));
        let l = bce_loss(&mut ctx, z, &Tensor::filled(&[6], 0.5)).unwrap();
        assert!((ctx.graph.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = ParamStore::new();
        for _ in 0..200 {
            let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let t: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let mut ctx = Ctx::eval(&s);
            let zn = ctx.constant(Tensor::matrix(1, 5, z.clone()).unwrap());
            let l = bce_loss(&mut ctx, zn, &Tensor::vector(t.clone()).unwrap()).unwrap();
            let naive = z.iter().zip(&t).map(|(&z, &t)| naive_bce(z, t)).sum::<f64>() / 5.0;
            assert!((ctx.graph.value(l).item() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_is_stationary_at_matching_targets() {
        let z = vec![-2.0, 0.3, 4.0];
        let mut p = ParamStore::new();
        p.insert("z", Tensor::matrix(1, 3, z.clone()).unwrap());
        let t = Tensor::vector(z.iter().map(|&z| sigmoid(z)).collect()).unwrap();
        let mut ctx = Ctx::eval(&p);
        let zn = ctx.param("z").unwrap();
        let l = bce_loss(&mut ctx, zn, &t).unwrap();
        let g = ctx.graph.backward(l).unwrap();
        assert!(g["z"].data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn bce_vanishes_when_saturated() {
        let s = ParamStore::new();
        let mut ctx = Ctx::eval(&s);
        let z = ctx.constant(Tensor::matrix(1, 4, vec![30.0, -30.0, 30.0, -30.0]).unwrap());
        let l = bce_loss(&mut ctx, z, &Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let v = ctx.graph.value(l).item();
        assert!((0.0..1e-12).contains(&v));
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let s = ParamStore::new();
        let mut ctx = Ctx::eval(&s);
        let z = ctx.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(bce_loss(&mut ctx, z, &Tensor::vector(vec![0.5, 1.5]).unwrap()), Err(Error::Validation(_))));
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> AnswerDistribution {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        AnswerDistribution::new(raw.iter().map(|x| x / s).collect()).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, c) = (random_dist(&mut rng, 6), random_dist(&mut rng, 6), random_dist(&mut rng, 6));
        let only_sem = ensemble(&a, &b, &c, EnsembleWeights::new(1.0, 0.0).unwrap()).unwrap();
        for (x, y) in only_sem.probs().iter().zip(a.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
        let u = AnswerDistribution::new(vec![0.25; 4]).unwrap();
        let mixed = ensemble(&u, &u, &u, EnsembleWeights::new(0.4, 0.3).unwrap()).unwrap();
        assert!(mixed.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        for _ in 0..100 {
            let (a, b, c) = (random_dist(&mut rng, 8), random_dist(&mut rng, 8), random_dist(&mut rng, 8));
            let out = ensemble(&a, &b, &c, EnsembleWeights::new(0.4, 0.3).unwrap()).unwrap();
            assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_weights_validated() {
        assert!(EnsembleWeights::new(0.7, 0.4).is_err());
        assert!(EnsembleWeights::new(-0.1, 0.4).is_err());
        assert!(EnsembleWeights::new(0.0, 1.0).is_ok());
        let u = AnswerDistribution::new(vec![0.5; 3]).unwrap();
        let v = AnswerDistribution::new(vec![0.5; 4]).unwrap();
        assert!(ensemble(&u, &u, &v, EnsembleWeights::new(0.4, 0.3).unwrap()).is_err());
    }

    #[test]
    fn ensemble_argmax_ignores_common_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let d: Vec<AnswerDistribution> = (0..3).map(|_| random_dist(&mut rng, 7)).collect();
            let w = EnsembleWeights::new(rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)).unwrap();
            let base = ensemble(&d[0], &d[1], &d[2], w).unwrap().argmax();
            let c = rng.gen_range(0.1..1.0);
            let scaled: Vec<AnswerDistribution> = d
                .iter()
                .map(|x| AnswerDistribution::new(x.probs().iter().map(|p| p * c).collect()).unwrap())
                .collect();
            assert_eq!(ensemble(&scaled[0], &scaled[1], &scaled[2], w).unwrap().argmax(), base);
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let d = AnswerDistribution::new(vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(d.argmax(), 1);
        assert_eq!(d.top_k(3), vec![(1, 0.4), (2, 0.4), (0, 0.1)]);
    }

    #[test]
    fn vqa_accuracy_examples() {
        let counts: BTreeMap<usize, u32> = [(2, 3), (5, 1), (7, 10)].into_iter().collect();
        assert_eq!(vqa_accuracy(2, &counts), 1.0);
        assert_eq!(vqa_accuracy(5, &counts), 1.0 / 3.0);
        assert_eq!(vqa_accuracy(4, &counts), 0.0);
        assert_eq!(vqa_accuracy(7, &counts), 1.0);
        let t = soft_targets(&counts, 8).unwrap();
        assert_eq!(t.data(), &[0., 0., 1., 0., 0., 1.0 / 3.0, 0., 1.]);
        assert!(soft_targets(&counts, 5).is_err());
    }
}
