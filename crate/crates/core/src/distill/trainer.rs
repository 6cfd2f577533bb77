use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bidi_loss, compound_loss, xe_loss, StudentBatch};
use crate::checkpoint::Checkpoint;
use crate::decode::{greedy_batch, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, rouge};
use crate::metrics_log::MetricsLog;
use crate::model::Student;
use crate::optim::{noam_lr, Adam, AdamConfig};
use crate::rng::{stream, RngState, Stream};
use crate::softlabel::SoftLabelStore;
use crate::tensor::{Graph, ParamStore};
use crate::text::{make_batches, Batch, SentencePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevMetric {
    Bleu,
    RougeL,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Teacher temperature the store must have been built with.
    pub temperature: f64,
    pub k: usize,
    pub eta: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub token_budget: usize,
    /// Micro-batches per optimizer update.
    pub accum_steps: usize,
    pub lsr_epsilon: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub log_interval: u64,
    pub dev_metric: DevMetric,
    /// Decoding limit for dev evaluation, in generated tokens.
    pub dev_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            temperature: 10.0,
            k: crate::softlabel::DEFAULT_K,
            eta: 2.0,
            warmup_steps: 4000,
            total_steps: 20_000,
            token_budget: 4096,
            accum_steps: 1,
            lsr_epsilon: 0.1,
            seed: 1,
            eval_interval: 1000,
            log_interval: 100,
            dev_metric: DevMetric::Bleu,
            dev_max_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            bad.push(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.eta > 0.0) {
            bad.push(format!("eta must be positive, got {}", self.eta));
        }
        if self.warmup_steps == 0 {
            bad.push("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.lsr_epsilon) {
            bad.push(format!(
                "lsr_epsilon must be in [0, 1), got {}",
                self.lsr_epsilon
            ));
        }
        if self.accum_steps == 0 {
            bad.push("accum_steps must be at least 1".into());
        }
        if self.total_steps == 0 {
            bad.push("total_steps must be at least 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// One line of the student metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentLogRecord {
    pub step: u64,
    pub lr: f64,
    pub xe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bidi: Option<f64>,
    pub compound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_metric: Option<f64>,
}

/// Progress that must survive a checkpoint for an exact resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub epoch_seed: u64,
    pub cursor: usize,
    pub best_metric: Option<f64>,
    pub best_step: u64,
    pub interval_xe: f64,
    pub interval_bidi: f64,
    pub interval_compound: f64,
    pub interval_steps: u64,
}

/// Losses of one optimizer update, averaged over its accumulation window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub xe: f64,
    pub bidi: Option<f64>,
    pub compound: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    /// Student at the best dev evaluation (the final one without dev data).
    pub best: Student,
    pub best_metric: Option<f64>,
    pub best_step: u64,
    /// Full training state after the last step.
    pub last: Checkpoint,
}

/// Adam + inverse-square-root schedule over token-budgeted batches, with the
/// compound objective when a soft-label store is supplied.
pub struct StudentTrainer<'d> {
    config: TrainConfig,
    student: Student,
    adam: Adam,
    train: &'d [SentencePair],
    dev: &'d [SentencePair],
    store: Option<&'d SoftLabelStore>,
    state: TrainState,
    batch_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    batches: Vec<Batch>,
    best_params: Option<ParamStore>,
    hashes: BTreeMap<String, String>,
}

impl<'d> StudentTrainer<'d> {
    pub fn new(
        student: Student,
        config: TrainConfig,
        train: &'d [SentencePair],
        dev: &'d [SentencePair],
        store: Option<&'d SoftLabelStore>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("student training corpus is empty".into()));
        }
        if let Some(store) = store {
            let h = store.header();
            if h.k != config.k || h.temperature != config.temperature {
                return Err(Error::Integrity(format!(
                    "soft-label store has K={} T={}, training expects K={} T={}",
                    h.k, h.temperature, config.k, config.temperature
                )));
            }
            store.check_coverage(train)?;
        }
        let adam = Adam::new(&student.params, AdamConfig::TRANSFORMER);
        Ok(StudentTrainer {
            batch_rng: stream(config.seed, Stream::Batching),
            dropout_rng: stream(config.seed, Stream::Dropout),
            config,
            student,
            adam,
            train,
            dev,
            store,
            state: TrainState::default(),
            batches: Vec::new(),
            best_params: None,
            hashes: BTreeMap::new(),
        })
    }

    /// Continues from a checkpoint written by [`StudentTrainer::checkpoint`].
    pub fn resume(
        ckpt: Checkpoint,
        train: &'d [SentencePair],
        dev: &'d [SentencePair],
        store: Option<&'d SoftLabelStore>,
    ) -> Result<Self> {
        let bad = |what: &str| Error::Integrity(format!("checkpoint cannot be resumed: {what}"));
        let config: TrainConfig = serde_json::from_value(ckpt.train_config.clone())
            .map_err(|e| bad(&format!("train config: {e}")))?;
        let state: TrainState = serde_json::from_value(ckpt.train_state.clone())
            .map_err(|e| bad(&format!("train state: {e}")))?;
        let rng = |name: &str| {
            ckpt.rng
                .get(name)
                .map(RngState::restore)
                .ok_or_else(|| bad(name))
        };
        let batch_rng = rng("batching")?;
        let dropout_rng = rng("dropout")?;
        let adam = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| bad("no optimizer state"))?;
        let best_params = ckpt.best_params.clone();
        let hashes = ckpt.hashes.clone();
        let student = ckpt.into_student()?;
        let mut t = StudentTrainer::new(student, config, train, dev, store)?;
        t.adam = adam;
        t.batch_rng = batch_rng;
        t.dropout_rng = dropout_rng;
        t.best_params = best_params;
        t.hashes = hashes;
        if state.step > 0 {
            t.batches = make_batches(train, t.config.token_budget, state.epoch_seed)?;
        }
        t.state = state;
        Ok(t)
    }

    /// Artifact hashes recorded in every checkpoint this trainer writes.
    pub fn set_hashes(&mut self, hashes: BTreeMap<String, String>) {
        self.hashes = hashes;
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn student(&self) -> &Student {
        &self.student
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.state.cursor >= self.batches.len() {
            self.state.epoch_seed = self.batch_rng.gen();
            self.state.epoch += 1;
            self.batches =
                make_batches(self.train, self.config.token_budget, self.state.epoch_seed)?;
            self.state.cursor = 0;
        }
        self.state.cursor += 1;
        Ok(self.batches[self.state.cursor - 1].clone())
    }

    /// One optimizer update from gradients accumulated over `micro` batches;
    /// each micro-batch loss is weighted by its share of the window's rows.
    pub fn step_on(&mut self, micro: &[StudentBatch]) -> Result<StepLosses> {
        let step = self.state.step + 1;
        let total: usize = micro.iter().map(StudentBatch::rows).sum();
        if total == 0 {
            return Err(Error::Contract(
                "accumulation window has no target positions".into(),
            ));
        }
        self.student.params.zero_grad();
        let (mut xe_sum, mut bidi_sum, mut comp_sum) = (0.0, 0.0, 0.0);
        for mb in micro {
            let share = mb.rows() as f64 / total as f64;
            let (values, grads) = {
                let mut g = Graph::train(&self.student.params, &mut self.dropout_rng);
                let logits = mb.logits(&self.student, &mut g)?;
                let xe = xe_loss(&mut g, logits, mb, self.config.lsr_epsilon)?;
                let (bidi, loss) = match self.store {
                    Some(store) => {
                        let b = bidi_loss(&mut g, logits, mb, store)?;
                        (Some(b), compound_loss(&mut g, xe, b, self.config.alpha)?)
                    }
                    None => (None, xe),
                };
                let weighted = g.scale(loss, share);
                let values = (
                    g.value(xe).item(),
                    bidi.map(|b| g.value(b).item()),
                    g.value(loss).item(),
                );
                (values, g.backward(weighted)?)
            };
            if !values.2.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: values.2,
                });
            }
            self.student.params.accumulate(&grads);
            xe_sum += share * values.0;
            bidi_sum += share * values.1.unwrap_or(0.0);
            comp_sum += share * values.2;
        }
        let lr = noam_lr(
            step,
            self.config.eta,
            self.student.config().d_model,
            self.config.warmup_steps,
        )?;
        self.adam.update(&mut self.student.params, lr);
        self.state.step = step;
        Ok(StepLosses {
            xe: xe_sum,
            bidi: self.store.map(|_| bidi_sum),
            compound: comp_sum,
            lr,
        })
    }

    /// Dev score of the current parameters under greedy decoding.
    pub fn evaluate(&self) -> Result<f64> {
        dev_score(
            &self.student,
            self.dev,
            self.config.dev_metric,
            self.config.dev_max_len,
        )
    }

    /// Trains until `total_steps` or `until_step`, whichever comes first.
    pub fn run(&mut self, log: &mut MetricsLog, until_step: Option<u64>) -> Result<()> {
        let stop = until_step.unwrap_or(u64::MAX).min(self.config.total_steps);
        while self.state.step < stop {
            let mut micro = Vec::with_capacity(self.config.accum_steps);
            for _ in 0..self.config.accum_steps {
                let batch = self.next_batch()?;
                micro.push(StudentBatch::new(
                    batch.indices.iter().map(|&i| &self.train[i]),
                ));
            }
            let losses = self.step_on(&micro)?;
            let step = self.state.step;
            self.state.interval_xe += losses.xe;
            self.state.interval_bidi += losses.bidi.unwrap_or(0.0);
            self.state.interval_compound += losses.compound;
            self.state.interval_steps += 1;

            let eval_now = !self.dev.is_empty()
                && (step % self.config.eval_interval.max(1) == 0
                    || step == self.config.total_steps);
            let metric = if eval_now {
                Some(self.evaluate()?)
            } else {
                None
            };
            if let Some(m) = metric {
                if self.state.best_metric.is_none_or(|b| m > b) {
                    self.state.best_metric = Some(m);
                    self.state.best_step = step;
                    self.best_params = Some(self.student.params.clone());
                }
            }
            if step % self.config.log_interval.max(1) == 0
                || metric.is_some()
                || step == self.config.total_steps
            {
                let n = self.state.interval_steps as f64;
                log.record(&StudentLogRecord {
                    step,
                    lr: losses.lr,
                    xe: self.state.interval_xe / n,
                    bidi: self.store.map(|_| self.state.interval_bidi / n),
                    compound: self.state.interval_compound / n,
                    dev_metric: metric,
                })?;
                self.state.interval_xe = 0.0;
                self.state.interval_bidi = 0.0;
                self.state.interval_compound = 0.0;
                self.state.interval_steps = 0;
            }
        }
        Ok(())
    }

    /// Everything needed to continue training bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::student(&self.student);
        ckpt.best_params = self.best_params.clone();
        ckpt.optimizer = Some(self.adam.clone());
        ckpt.train_config = serde_json::to_value(&self.config).expect("config serializes");
        ckpt.train_state = serde_json::to_value(&self.state).expect("state serializes");
        ckpt.rng
            .insert("batching".into(), RngState::capture(&self.batch_rng));
        ckpt.rng
            .insert("dropout".into(), RngState::capture(&self.dropout_rng));
        ckpt.hashes = self.hashes.clone();
        ckpt
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let last = self.checkpoint();
        let params = self
            .best_params
            .unwrap_or_else(|| self.student.params.clone());
        let best = Student::from_params(self.student.config().clone(), params)?;
        Ok(TrainOutcome {
            best,
            best_metric: self.state.best_metric,
            best_step: if self.state.best_metric.is_some() {
                self.state.best_step
            } else {
                self.state.step
            },
            last,
        })
    }
}

/// Corpus BLEU or macro ROUGE-L of greedy translations of `pairs`.
pub fn dev_score(
    student: &Student,
    pairs: &[SentencePair],
    metric: DevMetric,
    max_len: usize,
) -> Result<f64> {
    let config = DecodeConfig::new(1, 0.0, max_len.min(student.config().max_len - 1));
    let mut hyps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let sources: Vec<&[u32]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        hyps.extend(greedy_batch(student, &sources, &config)?);
    }
    let refs: Vec<&[u32]> = pairs.iter().map(|p| p.target.as_slice()).collect();
    match metric {
        DevMetric::Bleu => corpus_bleu(&hyps, &refs, 4),
        DevMetric::RougeL => Ok(rouge(&hyps, &refs)?.rouge_l),
    }
}
