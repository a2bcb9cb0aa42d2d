//! The training loop shared by the three methods: plain SGD, explicit
//! augmentation, and loss-dependent gradient weighting.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{augment_dataset, AugmentSpec, Dataset, Pair, TaskData, TaskSpec};
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::objective::{grad_weight, GradientWeightRule};
use crate::optimizer::{lr_at, sgd_step, weighted_average, SgdConfig, DIVERGENCE_LIMIT};
use crate::seq2seq::{
    forward_teacher_forced, greedy_decode, init_model, sample_loss, sample_loss_and_grad, LossEmbeddings,
    ModelConfig, LOSS_EMBED_DIM,
};

/// How a run uses the training data. Serialized externally tagged:
/// `"base"`, `{ augment = { .. } }` or `{ ours = { .. } }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Augment(AugmentSpec),
    Ours(GradientWeightRule),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Augment(_) => "augment",
            Method::Ours(_) => "ours",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Base => Ok(()),
            Method::Augment(a) => a.validate(),
            Method::Ours(r) => r.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub loss: LossKind,
    pub method: Method,
    pub optim: SgdConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.method.validate()?;
        self.optim.validate()?;
        if self.model.vocab_size != self.task.vocab_size() {
            return Err(Error::Invalid(format!(
                "model vocab_size {} does not match the task's {}",
                self.model.vocab_size,
                self.task.vocab_size()
            )));
        }
        if self.model.max_len < self.task.max_seq_len() {
            return Err(Error::Invalid(format!(
                "max_len {} is shorter than the task's longest sequence {}",
                self.model.max_len,
                self.task.max_seq_len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Teacher-forced argmax accuracy over all target positions.
    pub token_acc: f64,
    /// Fraction of inputs whose greedy decode equals the target exactly.
    pub seq_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalMetrics,
    pub wall_ms: f64,
    pub samples: usize,
    pub weight_range: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub epochs: Vec<EpochRecord>,
    pub test: EvalMetrics,
    pub samples_processed: usize,
}

pub fn evaluate(
    params: &ParamSet,
    cfg: &ModelConfig,
    loss: &LossKind,
    embeddings: &LossEmbeddings,
    data: &Dataset,
) -> Result<EvalMetrics> {
    let (mut total, mut correct, mut positions, mut exact) = (0.0, 0usize, 0usize, 0usize);
    for p in &data.pairs {
        total += sample_loss(params, cfg, loss, embeddings, &p.x, &p.y)?.value;
        let out = forward_teacher_forced(params, cfg, &p.x, &p.y)?;
        let target = p.y.content();
        correct += out.argmax().iter().zip(target).filter(|(a, b)| a == b).count();
        positions += target.len();
        if greedy_decode(params, cfg, &p.x)?.content() == target {
            exact += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        loss: total / n,
        token_acc: correct as f64 / positions.max(1) as f64,
        seq_acc: exact as f64 / n,
    })
}

/// Loss-space word vectors for a task; shared by every method so that runs
/// differ only in how they train.
pub fn loss_embeddings(task: &TaskSpec) -> Result<LossEmbeddings> {
    LossEmbeddings::random(task.vocab_size(), LOSS_EMBED_DIM, task.seed)
}

struct Item<'a> {
    pair: &'a Pair,
    /// Fixed multiplier; `None` means the method's rule decides.
    weight: Option<f64>,
}

fn as_divergence(err: Error, t: usize, seed: u64) -> Error {
    match err {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Divergence {
            t,
            seed,
            loss: f64::INFINITY,
        },
        other => other,
    }
}

/// Trains from a fresh initialization; `on_epoch` sees every epoch record
/// as soon as it is complete.
pub fn train<F>(cfg: &TrainConfig, data: &TaskData, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    let seed = cfg.optim.seed;
    let embeddings = loss_embeddings(&cfg.task)?;
    let mut params = init_model(&cfg.model, seed)?;

    let augmented = match &cfg.method {
        Method::Augment(spec) => augment_dataset(&data.train, spec, cfg.task.vocab_size(), seed ^ 0xa06)?,
        _ => Vec::new(),
    };
    let mut items: Vec<Item> = data.train.pairs.iter().map(|pair| Item { pair, weight: None }).collect();
    if let Method::Augment(spec) = &cfg.method {
        items.extend(augmented.iter().map(|pair| Item {
            pair,
            weight: Some(spec.weight_w),
        }));
    }
    let rule = match cfg.method {
        Method::Ours(r) => r,
        _ => GradientWeightRule::none().with_clip(1.0, 1.0),
    };

    let bs = cfg.optim.batch_size;
    let steps_per_epoch = items.len().div_ceil(bs);
    let total_t = steps_per_epoch * cfg.optim.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.optim.epochs);
    let mut t = 0;
    let mut samples_processed = 0;

    for epoch in 1..=cfg.optim.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut wr = (f64::INFINITY, f64::NEG_INFINITY);
        for batch in order.chunks(bs) {
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &items[i];
                let (lv, g) = sample_loss_and_grad(
                    &params,
                    &cfg.model,
                    &cfg.loss,
                    &embeddings,
                    &item.pair.x,
                    &item.pair.y,
                )
                .map_err(|e| as_divergence(e, t, seed))?;
                if !lv.value.is_finite() || lv.value > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence { t, seed, loss: lv.value });
                }
                let w = match item.weight {
                    Some(w) => w,
                    None => {
                        let w = grad_weight(lv.value, &rule);
                        if !(rule.w1..=rule.w2).contains(&w) {
                            return Err(Error::State(format!("weight {w} escaped [{}, {}]", rule.w1, rule.w2)));
                        }
                        wr = (wr.0.min(w), wr.1.max(w));
                        w
                    }
                };
                loss_sum += lv.value;
                grads.push((g, w));
            }
            let avg = weighted_average(&grads)?;
            params = sgd_step(&params, &avg, lr_at(t, total_t, &cfg.optim), 1.0)
                .map_err(|e| as_divergence(e, t, seed))?;
            t += 1;
        }
        samples_processed += items.len();
        let dev = evaluate(&params, &cfg.model, &cfg.loss, &embeddings, &data.dev)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / items.len() as f64,
            dev,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            samples: items.len(),
            weight_range: wr,
        };
        on_epoch(&record);
        epochs.push(record);
    }
    let test = evaluate(&params, &cfg.model, &cfg.loss, &embeddings, &data.test)?;
    Ok(TrainOutcome {
        params,
        epochs,
        test,
        samples_processed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_task, SplitSizes, TaskKind};
    use crate::optimizer::Schedule;

    fn tiny(method: Method, seed: u64) -> (TrainConfig, TaskData) {
        let task = TaskSpec {
            kind: TaskKind::Copy,
            content_vocab: 8,
            len_range: [2, 4],
            sizes: SplitSizes {
                train: 60,
                dev: 20,
                test: 20,
            },
            seed: 3,
        };
        let model = ModelConfig {
            embed_dim: 8,
            hidden_dim: 16,
            init_range: 0.3,
            ..task.model_config()
        };
        let optim = SgdConfig {
            schedule: Schedule::StartThenHalve {
                lr0: 0.01,
                halve_after_epoch: 4,
            },
            epochs: 5,
            batch_size: 2,
            seed,
        };
        let data = generate_task(&task).unwrap();
        (
            TrainConfig {
                task,
                model,
                loss: LossKind::CrossEntropy,
                method,
                optim,
            },
            data,
        )
    }

    fn strip_time(records: &[EpochRecord]) -> Vec<EpochRecord> {
        records.iter().map(|r| EpochRecord { wall_ms: 0.0, ..r.clone() }).collect()
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = tiny(Method::Ours(GradientWeightRule::uniform()), 7);
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(strip_time(&a.epochs), strip_time(&b.epochs));
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn degenerate_rule_reproduces_base_bit_for_bit() {
        for seed in [1, 2, 3] {
            let (base_cfg, data) = tiny(Method::Base, seed);
            let ours_cfg = TrainConfig {
                method: Method::Ours(GradientWeightRule::none().with_clip(1.0, 1.0)),
                ..base_cfg.clone()
            };
            let base = train(&base_cfg, &data, |_| {}).unwrap();
            let ours = train(&ours_cfg, &data, |_| {}).unwrap();
            assert_eq!(base.params, ours.params);
            for (b, o) in base.epochs.iter().zip(&ours.epochs) {
                assert_eq!(b.train_loss.to_bits(), o.train_loss.to_bits());
                assert_eq!(b.dev, o.dev);
            }
        }
    }

    #[test]
    fn augmentation_doubles_the_samples_seen() {
        let (base_cfg, data) = tiny(Method::Base, 1);
        let aug_cfg = TrainConfig {
            method: Method::Augment(AugmentSpec::default()),
            ..base_cfg.clone()
        };
        let ours_cfg = TrainConfig {
            method: Method::Ours(GradientWeightRule::uniform()),
            ..base_cfg.clone()
        };
        let base = train(&base_cfg, &data, |_| {}).unwrap();
        let aug = train(&aug_cfg, &data, |_| {}).unwrap();
        let ours = train(&ours_cfg, &data, |_| {}).unwrap();
        assert_eq!(base.samples_processed, 5 * 60);
        assert_eq!(aug.samples_processed, 2 * base.samples_processed);
        assert_eq!(ours.samples_processed, base.samples_processed);
    }

    #[test]
    fn cross_entropy_falls_over_the_first_epochs() {
        for seed in [1, 2, 3] {
            let (cfg, data) = tiny(Method::Base, seed);
            let out = train(&cfg, &data, |_| {}).unwrap();
            let losses: Vec<f64> = out.epochs.iter().map(|r| r.train_loss).collect();
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
        }
    }

    #[test]
    fn weights_stay_inside_the_clip_range() {
        let rule = GradientWeightRule::uniform();
        let (cfg, data) = tiny(Method::Ours(rule), 4);
        let out = train(&cfg, &data, |_| {}).unwrap();
        for r in &out.epochs {
            assert!(rule.w1 <= r.weight_range.0 && r.weight_range.1 <= rule.w2);
        }
    }

    #[test]
    fn on_epoch_sees_every_record_in_order() {
        let (cfg, data) = tiny(Method::Base, 1);
        let mut seen = Vec::new();
        train(&cfg, &data, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let (mut cfg, data) = tiny(Method::Base, 1);
        cfg.model.vocab_size += 1;
        assert!(matches!(train(&cfg, &data, |_| {}), Err(Error::Invalid(_))));
        let (mut cfg, data) = tiny(Method::Base, 1);
        cfg.model.max_len = 3;
        assert!(matches!(train(&cfg, &data, |_| {}), Err(Error::Invalid(_))));
    }

    #[test]
    fn overflowing_steps_report_divergence() {
        let (mut cfg, data) = tiny(Method::Base, 1);
        cfg.optim.schedule = Schedule::StartThenHalve {
            lr0: 1e308,
            halve_after_epoch: 10,
        };
        assert!(matches!(train(&cfg, &data, |_| {}), Err(Error::Divergence { seed: 1, .. })));
    }

    #[test]
    fn metrics_are_fractions() {
        let (cfg, data) = tiny(Method::Base, 2);
        let out = train(&cfg, &data, |_| {}).unwrap();
        for m in out.epochs.iter().map(|r| r.dev).chain([out.test]) {
            assert!((0.0..=1.0).contains(&m.token_acc) && (0.0..=1.0).contains(&m.seq_acc));
            assert!(m.loss >= 0.0);
        }
    }
}
