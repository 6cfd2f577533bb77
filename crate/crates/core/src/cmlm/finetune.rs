use serde::{Deserialize, Serialize};

use super::{cmlm_loss, cmlm_mask, masked_rows, MaskedExample};
use crate::error::{Error, Result};
use crate::metrics_log::MetricsLog;
use crate::model::{ModelConfig, Teacher, TeacherAttention};
use crate::optim::{triangular_lr, Adam, AdamConfig};
use crate::rng::{stream, Stream};
use crate::softlabel::circular_replicas;
use crate::tensor::Graph;
use crate::text::{make_batches, SentencePair};
use rand::Rng;

/// Teacher variants used in the ablation: the full teacher, a half-depth one,
/// and one restricted to left-to-right context over the target span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherVariant {
    Full,
    Small,
    LeftToRight,
}

impl TeacherVariant {
    pub const ALL: [TeacherVariant; 3] = [Self::Full, Self::Small, Self::LeftToRight];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Small => "small",
            Self::LeftToRight => "left_to_right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Architecture for this variant derived from the full teacher's config.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        match self {
            Self::Small => ModelConfig {
                layers: (base.layers / 2).max(1),
                ..base.clone()
            },
            Self::Full | Self::LeftToRight => base.clone(),
        }
    }

    pub fn attention(self) -> TeacherAttention {
        match self {
            Self::LeftToRight => TeacherAttention::LeftToRight,
            Self::Full | Self::Small => TeacherAttention::Bidirectional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    /// Peak learning rate of the triangular schedule.
    pub eta: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Target tokens per batch.
    pub token_budget: usize,
    pub mask_rate: f64,
    pub eval_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    /// Stop as soon as dev masked accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            eta: 1e-3,
            warmup_steps: 200,
            total_steps: 3000,
            token_budget: 512,
            mask_rate: super::DEFAULT_MASK_RATE,
            eval_interval: 250,
            log_interval: 50,
            seed: 1,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_accuracy: Option<f64>,
}

/// The best-dev teacher and how it was reached.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub teacher: Teacher,
    pub variant: TeacherVariant,
    pub best_accuracy: f64,
    pub best_step: u64,
    pub steps: u64,
}

/// Fraction of target tokens recovered when each is masked once, using the
/// deterministic 7-way circular cover.
pub fn masked_accuracy(teacher: &Teacher, pairs: &[SentencePair]) -> Result<f64> {
    let examples: Vec<MaskedExample> = pairs
        .iter()
        .flat_map(|p| circular_replicas(p, crate::softlabel::DEFAULT_REPLICAS))
        .filter(|e| !e.masked_positions.is_empty())
        .collect();
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in examples.chunks(64) {
        let (rows, labels) = masked_rows(chunk);
        let inputs: Vec<_> = chunk.iter().map(|e| e.input.clone()).collect();
        let mut g = Graph::eval(&teacher.params);
        let logits = teacher.logits_at(&mut g, &inputs, &rows)?;
        let values = g.value(logits);
        for (r, label) in labels.iter().enumerate() {
            let row = values.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            correct += usize::from(best as u32 == *label);
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

/// Trains a teacher variant from scratch on the C-MLM objective with Adam and a
/// triangular schedule, returning the parameters with the best dev accuracy.
pub fn finetune_teacher(
    train: &[SentencePair],
    dev: &[SentencePair],
    variant: TeacherVariant,
    base_model: &ModelConfig,
    config: &TeacherTrainConfig,
    log: &mut MetricsLog,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::Config("teacher training corpus is empty".into()));
    }
    if config.total_steps == 0 || config.warmup_steps == 0 || config.eta <= 0.0 {
        return Err(Error::Config(
            "teacher training needs positive eta, warmup_steps and total_steps".into(),
        ));
    }
    let model_config = variant.model_config(base_model);
    let mut teacher = Teacher::new(
        model_config,
        variant.attention(),
        &mut stream(config.seed, Stream::Init),
    )?;
    let mut adam = Adam::new(&teacher.params, AdamConfig::ENCODER);
    let mut mask_rng = stream(config.seed, Stream::Masking);
    let mut dropout_rng = stream(config.seed, Stream::Dropout);
    let mut batch_rng = stream(config.seed, Stream::Batching);

    let mut best = (f64::NEG_INFINITY, 0u64, teacher.params.clone());
    let mut step = 0u64;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0u64;
    'outer: loop {
        let batches = make_batches(train, config.token_budget, batch_rng.gen())?;
        for batch in batches {
            step += 1;
            let examples: Vec<MaskedExample> = batch
                .indices
                .iter()
                .map(|&i| cmlm_mask(&train[i], config.mask_rate, &mut mask_rng))
                .collect();
            let (loss, grads) = {
                let mut g = Graph::train(&teacher.params, &mut dropout_rng);
                let loss = cmlm_loss(&teacher, &mut g, &examples)?;
                (g.value(loss).item(), g.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            teacher.params.zero_grad();
            teacher.params.accumulate(&grads);
            let lr = triangular_lr(step, config.eta, config.warmup_steps, config.total_steps);
            adam.update(&mut teacher.params, lr);
            interval_loss += loss;
            interval_steps += 1;

            let eval_now = step % config.eval_interval.max(1) == 0 || step == config.total_steps;
            let accuracy = if eval_now && !dev.is_empty() {
                Some(masked_accuracy(&teacher, dev)?)
            } else {
                None
            };
            if step % config.log_interval.max(1) == 0 || accuracy.is_some() {
                log.record(&TeacherLogRecord {
                    step,
                    lr,
                    loss: interval_loss / interval_steps as f64,
                    masked_accuracy: accuracy,
                })?;
                interval_loss = 0.0;
                interval_steps = 0;
            }
            if let Some(acc) = accuracy {
                if acc > best.0 {
                    best = (acc, step, teacher.params.clone());
                }
                if config.target_accuracy.is_some_and(|t| acc >= t) {
                    break 'outer;
                }
            }
            if step >= config.total_steps {
                break 'outer;
            }
        }
    }
    let (best_accuracy, best_step, params) = if dev.is_empty() {
        (f64::NAN, step, teacher.params.clone())
    } else {
        best
    };
    let teacher = Teacher::from_params(teacher.config().clone(), teacher.attention(), params)?;
    Ok(FinetuneOutcome {
        teacher,
        variant,
        best_accuracy,
        best_step,
        steps: step,
    })
}
