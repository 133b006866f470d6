//! Forward-pass context and the small layer helpers shared by every module.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One forward pass: a fresh graph over a read-only parameter store.
///
/// Dropout is active only when the context was created with [`Ctx::train`].
pub struct Ctx<'p> {
    pub graph: Graph,
    pub params: &'p ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Ctx<'p> {
    pub fn eval(params: &'p ParamStore) -> Self {
        Ctx {
            graph: Graph::new(),
            params,
            rng: None,
        }
    }

    pub fn train(params: &'p ParamStore, dropout_seed: u64) -> Self {
        Ctx {
            graph: Graph::new(),
            params,
            rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        self.graph.param(self.params, name)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.graph.constant(t)
    }

    /// `x · W + 1 · b` with `W = {prefix}.W` and optional `b = {prefix}.b`.
    ///
    /// When the store holds a gain row `{prefix}.g`, the weight is reparameterized as
    /// `W_c = g_c · V_c / ‖V_c‖` per output column, with `V = {prefix}.W`.
    pub fn linear(&mut self, x: NodeId, prefix: &str, bias: bool) -> Result<NodeId> {
        let mut w = self.param(&join(prefix, "W"))?;
        let gain = join(prefix, "g");
        if self.params.contains(&gain) {
            w = self.weight_norm(w, &gain)?;
        }
        let xw = self.graph.matmul(x, w)?;
        if !bias {
            return Ok(xw);
        }
        let b = self.param(&join(prefix, "b"))?;
        let rows = self.graph.value(x).rows();
        let bb = self.repeat_rows(b, rows)?;
        self.graph.add(xw, bb)
    }

    fn weight_norm(&mut self, v: NodeId, gain: &str) -> Result<NodeId> {
        let g = self.param(gain)?;
        let rows = self.graph.shape(v)[0];
        let sq = self.graph.mul(v, v)?;
        let ones = self.graph.constant(Tensor::ones(&[1, rows]));
        let norm_sq = self.graph.matmul(ones, sq)?;
        let log = self.graph.log(norm_sq);
        let half = self.graph.scale(log, -0.5);
        let inv_norm = self.graph.exp(half);
        let scale = self.graph.mul(g, inv_norm)?;
        let scale = self.repeat_rows(scale, rows)?;
        self.graph.mul(v, scale)
    }

    /// Stacks a `1 × n` row `rows` times, as a product with a column of ones.
    pub fn repeat_rows(&mut self, row: NodeId, rows: usize) -> Result<NodeId> {
        if rows == 1 {
            return Ok(row);
        }
        let ones = self.graph.constant(Tensor::ones(&[rows, 1]));
        self.graph.matmul(ones, row)
    }

    /// Inverted dropout; the identity outside training or for `p = 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.graph.shape(x).to_vec();
        let n = self.graph.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        self.graph.mul_const(x, Tensor::new(shape, mask)?)
    }
}

/// Adds a gain row `{prefix}.g` equal to the column norms of `{prefix}.W`, switching that
/// layer to weight normalization without changing its current output.
pub fn enable_weight_norm(store: &mut ParamStore, prefix: &str) -> Result<()> {
    let w = store
        .get(&join(prefix, "W"))
        .ok_or_else(|| Error::UnknownParam(join(prefix, "W")))?;
    let (rows, cols) = (w.rows(), w.cols());
    let norms = (0..cols)
        .map(|c| libm::sqrt((0..rows).map(|r| w.at(r, c) * w.at(r, c)).sum::<f64>()))
        .collect();
    store.insert(join(prefix, "g"), Tensor::new(alloc::vec![1, cols], norms)?);
    Ok(())
}

pub fn join(prefix: &str, name: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + name.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(name);
    s
}

/// Registers `{prefix}.W` (`fan_in × fan_out`, Glorot uniform) and optionally a zero `{prefix}.b`.
pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    store.init_uniform(rng, &join(prefix, "W"), fan_in, fan_out);
    if bias {
        store.init_zeros(&join(prefix, "b"), &[1, fan_out]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_only_in_training() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::ones(&[1, 1000]));
        let mut eval = Ctx::eval(&store);
        let x = eval.param("x").unwrap();
        let y = eval.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
        let mut train = Ctx::train(&store, 1);
        let x = train.param("x").unwrap();
        let y = train.dropout(x, 0.5).unwrap();
        let vals = train.graph.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn weight_norm_starts_equal_and_differentiates() {
        let mut store = ParamStore::new();
        store.insert("l.W", Tensor::matrix(2, 2, alloc::vec![0.3, -1.0, 0.8, 0.5]).unwrap());
        store.insert("l.b", Tensor::matrix(1, 2, alloc::vec![0.1, 0.2]).unwrap());
        let x = Tensor::matrix(2, 2, alloc::vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let plain = {
            let mut ctx = Ctx::eval(&store);
            let xn = ctx.constant(x.clone());
            let y = ctx.linear(xn, "l", true).unwrap();
            ctx.graph.value(y).clone()
        };
        enable_weight_norm(&mut store, "l").unwrap();
        let mut ctx = Ctx::eval(&store);
        let xn = ctx.constant(x.clone());
        let y = ctx.linear(xn, "l", true).unwrap();
        for (a, b) in ctx.graph.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        store.get_mut("l.g").unwrap().data_mut()[1] = 1.7;
        let f = |p: &ParamStore| {
            let mut ctx = Ctx::eval(p);
            let xn = ctx.constant(x.clone());
            let y = ctx.linear(xn, "l", true)?;
            let t = ctx.graph.tanh(y);
            let s = ctx.graph.sum(t);
            Ok((ctx.graph, s))
        };
        let r = crate::gradcheck::gradcheck(f, &store, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert!(r.per_param_err.contains_key("l.g"));
    }

    #[test]
    fn linear_adds_bias_to_every_row() {
        let mut store = ParamStore::new();
        store.insert("l.W", Tensor::matrix(2, 1, alloc::vec![1.0, 2.0]).unwrap());
        store.insert("l.b", Tensor::matrix(1, 1, alloc::vec![0.5]).unwrap());
        let mut ctx = Ctx::eval(&store);
        let x = ctx.constant(Tensor::matrix(3, 2, alloc::vec![1., 1., 0., 1., 2., 0.]).unwrap());
        let y = ctx.linear(x, "l", true).unwrap();
        assert_eq!(ctx.graph.value(y).data(), &[3.5, 2.5, 2.5]);
    }
}
