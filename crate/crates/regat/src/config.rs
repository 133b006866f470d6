//! Run configuration: one JSON file, overridden by `--set key=value` and command flags.

use std::path::{Path, PathBuf};

use regat_core::config::{Ablation, ModelConfig};
use regat_core::graph::RelationKind;
use regat_core::optim::LrSchedule;
use regat_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(with = "kind_name")]
    pub kind: RelationKind,
    pub word_dim: usize,
    pub max_len: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_j: usize,
    pub classifier_hidden: usize,
    /// Largest region count accepted per image.
    pub max_regions: usize,
    pub far_threshold: f64,
    pub log_eps: f64,
    pub dropout: f64,
    pub classifier_dropout: f64,
    pub weight_norm: bool,
    pub attention: bool,
    pub question_adaptive: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: RelationKind::Implicit,
            word_dim: 16,
            max_len: 12,
            d_v: 16,
            d_q: 12,
            d_h: 16,
            heads: 4,
            d_j: 16,
            classifier_hidden: 32,
            max_regions: 36,
            far_threshold: regat_core::geometry::DEFAULT_FAR_THRESHOLD,
            log_eps: regat_core::geometry::DEFAULT_LOG_EPS,
            dropout: 0.2,
            classifier_dropout: 0.5,
            weight_norm: false,
            attention: true,
            question_adaptive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub decay_end: usize,
    /// Multiplies every rate of the schedule.
    pub lr_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = LrSchedule::default();
        TrainSection {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            lr_start: s.start,
            lr_peak: s.peak,
            warmup_epochs: s.warmup_epochs,
            decay_start: s.decay_start,
            decay_every: s.decay_every,
            decay_factor: s.decay_factor,
            decay_end: s.decay_end,
            lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { alpha: 0.4, beta: 0.3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub ensemble: EnsembleSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
                let file: Value = serde_json::from_str(&text).map_err(Error::json(p, 1))?;
                let mut base = serde_json::to_value(RunConfig::default()).expect("config serializes");
                merge(&mut base, file);
                base
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Validation(format!("invalid config{}: {e}", path.map_or(String::new(), |p| format!(" {}", p.display())))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the dataset vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.model_config(self.model.kind, 2, 1)?;
        self.train_config()?.validate().map_err(prefixed("train"))?;
        regat_core::fusion::EnsembleWeights::new(self.ensemble.alpha, self.ensemble.beta).map_err(prefixed("ensemble"))?;
        if self.model.max_regions == 0 {
            return Err(Error::Validation("model.max_regions must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, kind: RelationKind, vocab_size: usize, num_answers: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            kind,
            vocab_size,
            word_dim: m.word_dim,
            max_len: m.max_len,
            d_v: m.d_v,
            d_q: m.d_q,
            d_h: m.d_h,
            heads: m.heads,
            d_j: m.d_j,
            classifier_hidden: m.classifier_hidden,
            num_answers,
            far_threshold: m.far_threshold,
            log_eps: m.log_eps,
            dropout: m.dropout,
            classifier_dropout: m.classifier_dropout,
            weight_norm: m.weight_norm,
            ablation: Ablation {
                attention: m.attention,
                question_adaptive: m.question_adaptive,
            },
        };
        cfg.validate().map_err(prefixed("model"))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        if !(t.lr_scale > 0.0) {
            return Err(Error::Validation("train.lr_scale must be positive".into()));
        }
        let schedule = LrSchedule {
            start: t.lr_start,
            peak: t.lr_peak,
            warmup_epochs: t.warmup_epochs,
            decay_start: t.decay_start,
            decay_every: t.decay_every,
            decay_factor: t.decay_factor,
            decay_end: t.decay_end,
        }
        .scaled(t.lr_scale);
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            schedule,
        })
    }
}

mod kind_name {
    use regat_core::graph::RelationKind;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(kind: &RelationKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(kind.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RelationKind, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

fn prefixed(section: &'static str) -> impl Fn(regat_core::Error) -> Error {
    move |e| Error::Validation(format!("{section}: {e}"))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `section.key=value`; the value is read as JSON, falling back to a plain string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{spec}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Validation(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Validation(format!("unknown config key `{key}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Validation(format!("unknown config key `{key}`")))?;
    }
    Ok(())
}
