//! Question encoder: word embeddings, a bidirectional GRU, and self-attention pooling
//! over the hidden states.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::NodeId;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Ctx};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token ids truncated or padded to a fixed length, with a mask marking real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: &[usize], max_len: usize) -> Self {
        let n = ids.len().min(max_len);
        let mut padded = Vec::with_capacity(max_len);
        padded.extend_from_slice(&ids[..n]);
        padded.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|t| t < n).collect();
        TokenSequence { ids: padded, mask }
    }

    /// Explicit ids and mask; masked-out ids are ignored by the encoder whatever they hold.
    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Validation("token ids and pad mask differ in length".into()));
        }
        Ok(TokenSequence { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

const GATES: [(&str, &str, &str); 3] = [("Wz", "Uz", "bz"), ("Wr", "Ur", "br"), ("Wh", "Uh", "bh")];

pub fn init_gru<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, input: usize, hidden: usize) {
    for (w, u, b) in GATES {
        store.init_uniform(rng, &join(prefix, w), input, hidden);
        store.init_uniform(rng, &join(prefix, u), hidden, hidden);
        store.init_zeros(&join(prefix, b), &[1, hidden]);
    }
}

pub fn init_question_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    store.init_uniform(rng, "q.embed", cfg.vocab_size, cfg.word_dim);
    init_gru(store, rng, "q.fwd", cfg.word_dim, cfg.d_q / 2);
    init_gru(store, rng, "q.bwd", cfg.word_dim, cfg.d_q / 2);
    store.init_uniform(rng, "q.att.w", cfg.d_q, 1);
}

/// One GRU cell step on `1 × n` rows:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step(ctx: &mut Ctx, prefix: &str, x: NodeId, h: NodeId) -> Result<NodeId> {
    let wz = ctx.param(&join(prefix, "Wz"))?;
    let uz = ctx.param(&join(prefix, "Uz"))?;
    let (xin, hid) = (ctx.graph.shape(wz)[0], ctx.graph.shape(uz)[0]);
    if ctx.graph.shape(x) != [1, xin] || ctx.graph.shape(h) != [1, hid] {
        return Err(Error::Config(alloc::format!(
            "GRU `{prefix}` expects input [1, {xin}] and state [1, {hid}], got {:?} and {:?}",
            ctx.graph.shape(x),
            ctx.graph.shape(h)
        )));
    }
    let gate = |ctx: &mut Ctx, (w, u, b): (&str, &str, &str), state: NodeId| -> Result<NodeId> {
        let w = ctx.param(&join(prefix, w))?;
        let u = ctx.param(&join(prefix, u))?;
        let b = ctx.param(&join(prefix, b))?;
        let xw = ctx.graph.matmul(x, w)?;
        let hu = ctx.graph.matmul(state, u)?;
        let s = ctx.graph.add(xw, hu)?;
        ctx.graph.add(s, b)
    };
    let z_pre = gate(ctx, GATES[0], h)?;
    let z = ctx.graph.sigmoid(z_pre);
    let r_pre = gate(ctx, GATES[1], h)?;
    let r = ctx.graph.sigmoid(r_pre);
    let rh = ctx.graph.mul(r, h)?;
    let cand_pre = gate(ctx, GATES[2], rh)?;
    let cand = ctx.graph.tanh(cand_pre);
    let delta = ctx.graph.sub(cand, h)?;
    let step = ctx.graph.mul(z, delta)?;
    ctx.graph.add(h, step)
}

pub struct QuestionOutput {
    /// `1 × d_q`
    pub q: NodeId,
    /// Pooling weights over positions, `[max_len]`; zero at pad positions.
    pub weights: NodeId,
}

/// Bidirectional GRU over the embedded tokens (pad positions feed zero vectors), then a
/// masked softmax over `H·w` pools the concatenated forward/backward states into `q`.
pub fn encode_question(ctx: &mut Ctx, cfg: &ModelConfig, tokens: &TokenSequence) -> Result<QuestionOutput> {
    if tokens.real_tokens() == 0 {
        return Err(Error::Validation("question has no tokens".into()));
    }
    if let Some(&bad) = tokens
        .ids()
        .iter()
        .zip(tokens.mask())
        .find(|(&id, &m)| m && id >= cfg.vocab_size)
        .map(|(id, _)| id)
    {
        return Err(Error::Validation(alloc::format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let embed = ctx.param("q.embed")?;
    let inputs: Vec<NodeId> = tokens
        .ids()
        .iter()
        .zip(tokens.mask())
        .map(|(&id, &real)| {
            if real {
                ctx.graph.row(embed, id)
            } else {
                Ok(ctx.constant(Tensor::zeros(&[1, cfg.word_dim])))
            }
        })
        .collect::<Result<_>>()?;
    let half = cfg.d_q / 2;
    let len = inputs.len();

    let mut fwd = Vec::with_capacity(len);
    let mut h = ctx.constant(Tensor::zeros(&[1, half]));
    for &x in &inputs {
        h = gru_step(ctx, "q.fwd", x, h)?;
        fwd.push(h);
    }
    let mut bwd = alloc::vec![h; len];
    let mut h = ctx.constant(Tensor::zeros(&[1, half]));
    for t in (0..len).rev() {
        h = gru_step(ctx, "q.bwd", inputs[t], h)?;
        bwd[t] = h;
    }
    let states: Vec<NodeId> = (0..len)
        .map(|t| ctx.graph.concat(&[fwd[t], bwd[t]]))
        .collect::<Result<_>>()?;
    let hmat = ctx.graph.concat_rows(&states)?;
    let w = ctx.param("q.att.w")?;
    let scores = ctx.graph.matmul(hmat, w)?;
    let scores = ctx.graph.reshape(scores, &[len])?;
    let weights = ctx.graph.softmax_masked(scores, tokens.mask())?;
    let row = ctx.graph.reshape(weights, &[1, len])?;
    let q = ctx.graph.matmul(row, hmat)?;
    Ok(QuestionOutput { q, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::graph::RelationKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(RelationKind::Spatial, 9, 4, 3);
        c.word_dim = 3;
        c.d_q = 4;
        c.max_len = 5;
        c
    }

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_question_encoder(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), &cfg());
        s
    }

    #[test]
    fn token_sequence_pads_and_truncates() {
        let t = TokenSequence::new(&[4, 5], 4);
        assert_eq!(t.ids(), &[4, 5, 0, 0]);
        assert_eq!(t.mask(), &[true, true, false, false]);
        let t = TokenSequence::new(&[1, 2, 3, 4, 5, 6], 4);
        assert_eq!(t.ids(), &[1, 2, 3, 4]);
        assert_eq!(t.real_tokens(), 4);
    }

    #[test]
    fn zero_params_stay_at_zero() {
        let mut s = ParamStore::new();
        init_gru(&mut s, &mut ChaCha8Rng::seed_from_u64(0), "g", 3, 2);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ctx = Ctx::eval(&s);
        let x = ctx.constant(Tensor::matrix(1, 3, alloc::vec![0.3, -1.0, 2.0]).unwrap());
        let h = ctx.constant(Tensor::zeros(&[1, 2]));
        let out = gru_step(&mut ctx, "g", x, h).unwrap();
        assert_eq!(ctx.graph.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn closed_update_gate_keeps_state() {
        let mut s = ParamStore::new();
        init_gru(&mut s, &mut ChaCha8Rng::seed_from_u64(1), "g", 3, 2);
        s.insert("g.bz", Tensor::filled(&[1, 2], -60.0));
        let mut ctx = Ctx::eval(&s);
        let x = ctx.constant(Tensor::matrix(1, 3, alloc::vec![0.3, -1.0, 2.0]).unwrap());
        let h = ctx.constant(Tensor::matrix(1, 2, alloc::vec![0.7, -0.2]).unwrap());
        let out = gru_step(&mut ctx, "g", x, h).unwrap();
        for (a, b) in ctx.graph.value(out).data().iter().zip([0.7, -0.2]) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn gru_dimension_mismatch_is_config_error() {
        let mut s = ParamStore::new();
        init_gru(&mut s, &mut ChaCha8Rng::seed_from_u64(1), "g", 3, 2);
        let mut ctx = Ctx::eval(&s);
        let x = ctx.constant(Tensor::zeros(&[1, 4]));
        let h = ctx.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(gru_step(&mut ctx, "g", x, h), Err(Error::Config(_))));
    }

    #[test]
    fn gru_cell_gradcheck() {
        let mut s = ParamStore::new();
        init_gru(&mut s, &mut ChaCha8Rng::seed_from_u64(2), "g", 3, 4);
        s.insert("x", Tensor::matrix(1, 3, alloc::vec![0.5, -0.4, 0.9]).unwrap());
        s.insert("h", Tensor::matrix(1, 4, alloc::vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let f = |p: &ParamStore| {
            let mut ctx = Ctx::eval(p);
            let x = ctx.param("x")?;
            let h = ctx.param("h")?;
            let h1 = gru_step(&mut ctx, "g", x, h)?;
            let h2 = gru_step(&mut ctx, "g", x, h1)?;
            let sq = ctx.graph.mul(h2, h2)?;
            let out = ctx.graph.sum(sq);
            Ok((ctx.graph, out))
        };
        let r = gradcheck(f, &s, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn single_token_question_pools_to_its_state() {
        let s = store(3);
        let mut ctx = Ctx::eval(&s);
        let out = encode_question(&mut ctx, &cfg(), &TokenSequence::new(&[4], 5)).unwrap();
        assert_eq!(ctx.graph.value(out.weights).data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ctx.graph.shape(out.q), &[1, 4]);
    }

    #[test]
    fn pad_content_never_changes_q() {
        let s = store(4);
        let run = |ids: Vec<usize>| {
            let t = TokenSequence::with_mask(ids, alloc::vec![true, true, true, false, false]).unwrap();
            let mut ctx = Ctx::eval(&s);
            let out = encode_question(&mut ctx, &cfg(), &t).unwrap();
            let w: f64 = ctx.graph.value(out.weights).data().iter().sum();
            assert!((w - 1.0).abs() < 1e-12);
            ctx.graph.value(out.q).clone()
        };
        let a = run(alloc::vec![2, 3, 4, 0, 0]);
        let b = run(alloc::vec![2, 3, 4, 7, 8]);
        let c = run(alloc::vec![2, 3, 4, 8, 5]);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_question_rejected() {
        let s = store(5);
        let mut ctx = Ctx::eval(&s);
        let t = TokenSequence::new(&[], 5);
        assert!(matches!(encode_question(&mut ctx, &cfg(), &t), Err(Error::Validation(_))));
    }

    #[test]
    fn encoder_gradcheck() {
        let s = store(6);
        let t = TokenSequence::new(&[2, 5, 3], 5);
        let f = |p: &ParamStore| {
            let mut ctx = Ctx::eval(p);
            let out = encode_question(&mut ctx, &cfg(), &t)?;
            let sq = ctx.graph.mul(out.q, out.q)?;
            let loss = ctx.graph.sum(sq);
            Ok((ctx.graph, loss))
        };
        let r = gradcheck(f, &s, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
