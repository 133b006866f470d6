//! Model dimensions and switches.

use crate::error::{Error, Result};
use crate::geometry::{DEFAULT_FAR_THRESHOLD, DEFAULT_LOG_EPS};
use crate::graph::RelationKind;

/// Ablation switches. Both on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Off: every vertex averages its neighborhood uniformly (graph-convolution style).
    pub attention: bool,
    /// Off: a zero vector is concatenated in place of the question embedding.
    pub question_adaptive: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            attention: true,
            question_adaptive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: RelationKind,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub max_len: usize,
    pub d_v: usize,
    /// Question embedding size; each GRU direction carries half.
    pub d_q: usize,
    /// Relation feature size before the projection back to `d_v`; split across `heads`.
    pub d_h: usize,
    pub heads: usize,
    pub d_j: usize,
    pub classifier_hidden: usize,
    pub num_answers: usize,
    pub far_threshold: f64,
    pub log_eps: f64,
    pub dropout: f64,
    pub classifier_dropout: f64,
    /// Weight-normalized linear maps in fusion, classifier and output projections.
    pub weight_norm: bool,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Toy dimensions; word embeddings are trained from scratch.
    pub fn toy(kind: RelationKind, vocab_size: usize, d_v: usize, num_answers: usize) -> Self {
        ModelConfig {
            kind,
            vocab_size,
            word_dim: 32,
            max_len: 14,
            d_v,
            d_q: 16,
            d_h: 16,
            heads: 4,
            d_j: 32,
            classifier_hidden: 64,
            num_answers,
            far_threshold: DEFAULT_FAR_THRESHOLD,
            log_eps: DEFAULT_LOG_EPS,
            dropout: 0.2,
            classifier_dropout: 0.5,
            weight_norm: false,
            ablation: Ablation::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("max_len", self.max_len),
            ("d_v", self.d_v),
            ("d_q", self.d_q),
            ("d_h", self.d_h),
            ("heads", self.heads),
            ("d_j", self.d_j),
            ("classifier_hidden", self.classifier_hidden),
            ("num_answers", self.num_answers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(alloc::format!("{key} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must cover the pad and unknown ids".into()));
        }
        if self.d_q % 2 != 0 {
            return Err(Error::Config(alloc::format!("d_q = {} must be even (two GRU directions)", self.d_q)));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "d_h = {} is not divisible by heads = {}",
                self.d_h,
                self.heads
            )));
        }
        if self.kind == RelationKind::Implicit && self.d_h % 8 != 0 {
            return Err(Error::Config(alloc::format!(
                "d_h = {} must be a multiple of 8 for the geometry embedding",
                self.d_h
            )));
        }
        for (key, p) in [("dropout", self.dropout), ("classifier_dropout", self.classifier_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("{key} = {p} must lie in [0, 1)")));
            }
        }
        if !(self.far_threshold > 0.0) {
            return Err(Error::Config("far_threshold must be positive".into()));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::Config("log_eps must be positive".into()));
        }
        Ok(())
    }
}
