//! Adamax and the warmup/step-decay learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// Per parameter: first moment `m` and infinity norm `u`.
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adamax {
    fn default() -> Self {
        Adamax {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adamax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `(m, u)` of a parameter, once it has received a gradient.
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(name).map(|(m, u)| (m, u))
    }

    /// `m ← β₁m + (1−β₁)g`, `u ← max(β₂u, |g|)`, `θ ← θ − lr/(1−β₁ᵗ) · m/(u+ε)`.
    ///
    /// Any non-finite gradient aborts the whole step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adamax",
                    lhs: p.shape().into(),
                    rhs: g.shape().into(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let correction = lr / (1.0 - libm::pow(self.beta1, self.step as f64));
        for (name, g) in grads {
            let (m, u) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let theta = params.get_mut(name).expect("checked above");
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let ui = &mut u.data_mut()[i];
                *ui = (self.beta2 * *ui).max(gi.abs());
                theta.data_mut()[i] -= correction * *mi / (*ui + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate per epoch: linear warmup, a plateau, then a fixed number of halvings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    /// Epoch at which `peak` is reached.
    pub warmup_epochs: usize,
    /// First epoch with a decayed rate.
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Decay stops here; later epochs keep the last rate.
    pub decay_end: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            start: 0.0005,
            peak: 0.002,
            warmup_epochs: 4,
            decay_start: 15,
            decay_every: 2,
            decay_factor: 0.5,
            decay_end: 20,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            start: lr,
            peak: lr,
            warmup_epochs: 0,
            decay_start: usize::MAX,
            decay_every: 1,
            decay_factor: 1.0,
            decay_end: usize::MAX,
        }
    }

    /// The same shape with every rate multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        LrSchedule {
            start: self.start * factor,
            peak: self.peak * factor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.peak > 0.0) {
            return Err(Error::Config("schedule rates must be positive".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("schedule decay_every must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("schedule decay_factor must lie in (0, 1]".into()));
        }
        if self.warmup_epochs > self.decay_start {
            return Err(Error::Config("schedule warmup must end before decay starts".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.start + (self.peak - self.start) * epoch as f64 / self.warmup_epochs as f64;
        }
        if epoch < self.decay_start {
            return self.peak;
        }
        let last = epoch.min(self.decay_end.saturating_sub(1)).max(self.decay_start);
        let halvings = (last - self.decay_start) / self.decay_every + 1;
        self.peak * libm::pow(self.decay_factor, halvings as f64)
    }
}
