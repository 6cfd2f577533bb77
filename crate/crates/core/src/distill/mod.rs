//! Student training objectives: label-smoothed MLE, top-K distillation from the
//! soft-label store, and their convex combination.

mod trainer;

pub use trainer::{
    dev_score, DevMetric, StepLosses, StudentLogRecord, StudentTrainer, TrainConfig, TrainOutcome,
    TrainState,
};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Student;
use crate::softlabel::SoftLabelStore;
use crate::tensor::{Graph, SoftTargets, Var};
use crate::text::special::{BOS, EOS};
use crate::text::SentencePair;

/// Teacher-forcing view of some pairs: BOS-prefixed decoder inputs and
/// EOS-suffixed prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBatch {
    pub pair_ids: Vec<u32>,
    pub sources: Vec<Vec<u32>>,
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl StudentBatch {
    pub fn new<'p>(pairs: impl IntoIterator<Item = &'p SentencePair>) -> Self {
        let mut b = StudentBatch {
            pair_ids: Vec::new(),
            sources: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for p in pairs {
            b.pair_ids.push(p.pair_id);
            b.sources.push(p.source.clone());
            b.inputs.push(
                std::iter::once(BOS)
                    .chain(p.target.iter().copied())
                    .collect(),
            );
            b.targets.push(
                p.target
                    .iter()
                    .copied()
                    .chain(std::iter::once(EOS))
                    .collect(),
            );
        }
        b
    }

    /// Number of predicted positions.
    pub fn rows(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }

    /// Teacher-forced logits, one row per predicted position.
    pub fn logits(&self, student: &Student, g: &mut Graph<'_>) -> Result<Var> {
        let src: Vec<&[u32]> = self.sources.iter().map(Vec::as_slice).collect();
        let inp: Vec<&[u32]> = self.inputs.iter().map(Vec::as_slice).collect();
        Ok(student.forward(g, &src, &inp)?)
    }

    fn check_rows(&self) -> Result<f64> {
        match self.rows() {
            0 => Err(Error::Contract("batch has no target positions".into())),
            n => Ok(1.0 / n as f64),
        }
    }
}

/// Smoothed targets `(1 - eps) * onehot + eps / V` with equal row weights.
pub fn xe_targets(batch: &StudentBatch, lsr_epsilon: f64) -> Result<SoftTargets> {
    let w = batch.check_rows()?;
    let mut t = SoftTargets::new();
    for &y in batch.targets.iter().flatten() {
        t.push_row([(y, 1.0 - lsr_epsilon)], lsr_epsilon, w);
    }
    Ok(t)
}

/// Stored teacher distributions for every target token; the final EOS
/// position, which the teacher never predicts, gets a one-hot EOS target.
pub fn bidi_targets(batch: &StudentBatch, store: &SoftLabelStore) -> Result<SoftTargets> {
    let w = batch.check_rows()?;
    let mut t = SoftTargets::new();
    for (&pair_id, targets) in batch.pair_ids.iter().zip(&batch.targets) {
        let n = targets.len() - 1;
        for position in 0..n {
            let rec = store
                .get(pair_id, position)
                .ok_or(Error::MissingSoftLabel { pair_id, position })?;
            t.push_row(rec.entries.iter().map(|&(id, p)| (id, p as f64)), 0.0, w);
        }
        t.push_row([(EOS, 1.0)], 0.0, w);
    }
    Ok(t)
}

/// Mean label-smoothed cross-entropy over all predicted positions.
pub fn xe_loss(
    g: &mut Graph<'_>,
    logits: Var,
    batch: &StudentBatch,
    lsr_epsilon: f64,
) -> Result<Var> {
    let t = xe_targets(batch, lsr_epsilon)?;
    Ok(g.soft_cross_entropy(logits, Arc::new(t))?)
}

/// Mean cross-entropy against the teacher's top-K distributions.
pub fn bidi_loss(
    g: &mut Graph<'_>,
    logits: Var,
    batch: &StudentBatch,
    store: &SoftLabelStore,
) -> Result<Var> {
    let t = bidi_targets(batch, store)?;
    Ok(g.soft_cross_entropy(logits, Arc::new(t))?)
}

/// `alpha * bidi + (1 - alpha) * xe`.
pub fn compound_loss(g: &mut Graph<'_>, xe: Var, bidi: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let a = g.scale(bidi, alpha);
    let b = g.scale(xe, 1.0 - alpha);
    Ok(g.add(a, b)?)
}
