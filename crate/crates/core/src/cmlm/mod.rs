//! Conditional masked language modeling: the teacher sees the whole source and
//! an incomplete target, and predicts the masked target tokens.

mod finetune;
mod masking;

pub use finetune::{
    finetune_teacher, masked_accuracy, FinetuneOutcome, TeacherLogRecord, TeacherTrainConfig,
    TeacherVariant,
};
pub use masking::{cmlm_mask, mask_count, MaskedExample, DEFAULT_MASK_RATE};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Teacher;
use crate::tensor::{Graph, SoftTargets, Var};

/// Rows `(example, absolute position)` of every masked token, with their labels.
fn masked_rows(examples: &[MaskedExample]) -> (Vec<(usize, usize)>, Vec<u32>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        for (&t, &label) in ex.masked_positions.iter().zip(&ex.labels) {
            rows.push((i, ex.input.target_start + t));
            labels.push(label);
        }
    }
    (rows, labels)
}

fn masked_targets(labels: Vec<u32>) -> Arc<SoftTargets> {
    let w = 1.0 / labels.len() as f64;
    let mut targets = SoftTargets::new();
    for label in labels {
        targets.push_row([(label, 1.0)], 0.0, w);
    }
    Arc::new(targets)
}

/// Mean cross-entropy over masked target positions only.
pub fn cmlm_loss(teacher: &Teacher, g: &mut Graph<'_>, examples: &[MaskedExample]) -> Result<Var> {
    let (rows, labels) = masked_rows(examples);
    if rows.is_empty() {
        return Err(Error::Contract("batch has no masked positions".into()));
    }
    let inputs: Vec<_> = examples.iter().map(|e| e.input.clone()).collect();
    let logits = teacher.logits_at(g, &inputs, &rows)?;
    Ok(g.soft_cross_entropy(logits, masked_targets(labels))?)
}

/// The same loss computed from logits at every packed position, rows of all
/// examples concatenated in order.
pub fn masked_cross_entropy(
    g: &mut Graph<'_>,
    logits: Var,
    examples: &[MaskedExample],
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for ex in examples {
        for (&t, &label) in ex.masked_positions.iter().zip(&ex.labels) {
            rows.push(offset + ex.input.target_start + t);
            labels.push(label);
        }
        offset += ex.input.len();
    }
    if rows.is_empty() {
        return Err(Error::Contract("batch has no masked positions".into()));
    }
    let picked = g.select_rows(logits, &rows)?;
    Ok(g.soft_cross_entropy(picked, masked_targets(labels))?)
}
