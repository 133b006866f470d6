//! Minibatch training and evaluation of one relation model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{bce_loss, vqa_accuracy, AnswerDistribution};
use crate::model::{forward, loss_graph, Sample};
use crate::nn::Ctx;
use crate::optim::{Adamax, LrSchedule};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds shuffling and dropout.
    pub seed: u64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            schedule: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Eval-mode mean BCE over the training set after the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<AnswerDistribution>,
}

/// Eval-mode scores, mean loss and mean VQA accuracy over `samples`.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let mut acc = 0.0;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let mut ctx = Ctx::eval(params);
        let out = forward(&mut ctx, cfg, s)?;
        let l = bce_loss(&mut ctx, out.logits, &s.targets)?;
        loss += ctx.graph.value(l).item();
        let dist = AnswerDistribution::from_logits(ctx.graph.value(out.logits).data())?;
        acc += vqa_accuracy(dist.argmax(), &s.answers);
        predictions.push(dist);
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        accuracy: acc / n,
        loss: loss / n,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Parameters of the best epoch by validation accuracy (training accuracy without a
    /// validation set), or the initial parameters if no epoch finished.
    pub best_params: ParamStore,
    pub best_epoch: Option<usize>,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

pub struct Trainer<'c> {
    cfg: &'c ModelConfig,
    tc: TrainConfig,
    params: ParamStore,
    opt: Adamax,
    rng: ChaCha8Rng,
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: &'c ModelConfig, tc: TrainConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        tc.validate()?;
        Ok(Trainer {
            cfg,
            tc,
            params,
            opt: Adamax::new(),
            rng: ChaCha8Rng::seed_from_u64(tc.seed),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// One pass over `train` in shuffled minibatches. Returns the mean minibatch loss.
    pub fn train_epoch(&mut self, train: &[Sample], lr: f64) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.tc.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = self.rng.gen::<u64>();
            let (mut g, loss) = loss_graph(&self.params, self.cfg, &batch, Some(seed))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} in batch {batches}")));
            }
            let grads = g.backward(loss)?;
            self.opt.step(&mut self.params, &grads, lr)?;
            total += value;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Runs all epochs. `on_epoch` sees each epoch's metrics, the current parameters and
    /// whether this epoch is the best so far.
    pub fn fit(
        mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochMetrics, &ParamStore, bool),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let mut report = TrainReport {
            metrics: Vec::new(),
            best_params: self.params.clone(),
            best_epoch: None,
            aborted: None,
        };
        let mut best_score = f64::NEG_INFINITY;
        for epoch in 0..self.tc.epochs {
            let lr = self.tc.schedule.lr_at(epoch);
            let result = self.train_epoch(train, lr).and_then(|_| {
                let on_train = evaluate(&self.params, self.cfg, train)?;
                if !on_train.loss.is_finite() {
                    return Err(Error::NonFinite(format!("training-set loss {}", on_train.loss)));
                }
                let val_acc = if val.is_empty() {
                    None
                } else {
                    Some(evaluate(&self.params, self.cfg, val)?.accuracy)
                };
                Ok(EpochMetrics {
                    epoch,
                    loss: on_train.loss,
                    train_acc: on_train.accuracy,
                    val_acc,
                    lr,
                })
            });
            let metrics = match result {
                Ok(m) => m,
                Err(Error::NonFinite(what)) => {
                    log::error!("epoch {epoch}: non-finite {what}; stopping with the last good parameters");
                    report.aborted = Some(format!("epoch {epoch}: non-finite {what}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            let score = metrics.val_acc.unwrap_or(metrics.train_acc);
            let is_best = score > best_score;
            if is_best {
                best_score = score;
                report.best_params = self.params.clone();
                report.best_epoch = Some(epoch);
            }
            log::info!(
                "epoch {epoch}: loss {:.5} train_acc {:.4} val_acc {} lr {lr}",
                metrics.loss,
                metrics.train_acc,
                metrics.val_acc.map_or_else(|| String::from("-"), |v| format!("{v:.4}"))
            );
            on_epoch(&metrics, &self.params, is_best);
            report.metrics.push(metrics);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::graph::{RegionSet, RelationKind};
    use crate::model::init_params;
    use crate::tensor::Tensor;

    /// Two tokens decide which of two regions' features carries the answer.
    fn toy_set(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let a = rng.gen_range(0..cfg.num_answers);
                let b = rng.gen_range(0..cfg.num_answers);
                let mut feats = alloc::vec![0.0; 2 * cfg.d_v];
                feats[a] = 1.0;
                feats[cfg.d_v + b] = 1.0;
                let boxes = alloc::vec![BBox::new(0., 0., 10., 10.).unwrap(), BBox::new(20., 0., 10., 10.).unwrap()];
                let regions = RegionSet::new(Tensor::matrix(2, cfg.d_v, feats).unwrap(), boxes).unwrap();
                let first = rng.gen_bool(0.5);
                let ans = if first { a } else { b };
                let tokens = [if first { 2 } else { 3 }, 4];
                let answers = [(ans, 10)].into_iter().collect();
                Sample::new(cfg, format!("{i}"), &tokens, regions, &[], answers).unwrap()
            })
            .collect()
    }

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(RelationKind::Spatial, 5, 4, 4);
        c.word_dim = 8;
        c.d_q = 8;
        c.d_h = 8;
        c.heads = 2;
        c.d_j = 16;
        c.classifier_hidden = 16;
        c
    }

    fn tc() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            seed: 3,
            schedule: LrSchedule::constant(0.01),
        }
    }

    #[test]
    fn learns_a_small_task() {
        let mut c = cfg();
        c.dropout = 0.0;
        c.classifier_dropout = 0.0;
        let data = toy_set(&c, 48, 1);
        let fast = TrainConfig {
            epochs: 40,
            schedule: LrSchedule::constant(0.02),
            ..tc()
        };
        let t = Trainer::new(&c, fast, init_params(&c, 0).unwrap()).unwrap();
        let report = t.fit(&data, &[], |_, _, _| {}).unwrap();
        let first = &report.metrics[0];
        let last = report.metrics.last().unwrap();
        assert!(last.loss < first.loss);
        assert!(last.train_acc > 0.95, "{last:?}");
        assert!(report.aborted.is_none());
    }

    #[test]
    fn training_is_reproducible() {
        let c = cfg();
        let data = toy_set(&c, 16, 2);
        let mut quick = tc();
        quick.epochs = 3;
        let run = || {
            Trainer::new(&c, quick, init_params(&c, 0).unwrap())
                .unwrap()
                .fit(&data, &data, |_, _, _| {})
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let c = cfg();
        let data = toy_set(&c, 8, 4);
        let p = init_params(&c, 1).unwrap();
        assert_eq!(evaluate(&p, &c, &data).unwrap(), evaluate(&p, &c, &data).unwrap());
        assert!(evaluate(&p, &c, &[]).is_err());
    }

    #[test]
    fn nan_parameters_abort_with_last_good_state() {
        let c = cfg();
        let data = toy_set(&c, 8, 5);
        let mut p = init_params(&c, 2).unwrap();
        p.get_mut("cls.1.b").unwrap().data_mut()[0] = f64::NAN;
        let report = Trainer::new(&c, tc(), p.clone()).unwrap().fit(&data, &[], |_, _, _| {}).unwrap();
        assert!(report.aborted.is_some());
        assert!(report.metrics.is_empty());
        assert_eq!(report.best_epoch, None);
        assert!(report.best_params.get("cls.1.b").unwrap().data()[0].is_nan());
    }

    #[test]
    fn empty_training_set_rejected() {
        let c = cfg();
        let t = Trainer::new(&c, tc(), init_params(&c, 0).unwrap()).unwrap();
        assert!(t.fit(&[], &[], |_, _, _| {}).is_err());
    }
}
