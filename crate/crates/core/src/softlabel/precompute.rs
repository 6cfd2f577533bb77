use rayon::prelude::*;

use super::{
    circular_replicas, extract_topk, SoftLabelRecord, SoftLabelStore, StoreHeader, StoreProvenance,
    DEFAULT_REPLICAS,
};
use crate::cmlm::MaskedExample;
use crate::error::{Error, Result};
use crate::model::Teacher;
use crate::tensor::Graph;
use crate::text::SentencePair;

const PAIRS_PER_TASK: usize = 16;

#[derive(Clone, Debug)]
pub struct Precomputed {
    pub store: SoftLabelStore,
    /// Number of masked replicas run through the teacher.
    pub forward_passes: usize,
}

/// Runs the frozen teacher over the circular replicas of every pair and keeps
/// the top-`k` tempered distribution at each masked target position. The
/// result does not depend on the number of worker threads.
pub fn precompute(
    pairs: &[SentencePair],
    teacher: &Teacher,
    k: usize,
    temperature: f64,
    provenance: StoreProvenance,
) -> Result<Precomputed> {
    if k == 0 || k > teacher.config().vocab_size {
        return Err(Error::Config(format!(
            "K must be in [1, {}], got {k}",
            teacher.config().vocab_size
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shards: Vec<(Vec<SoftLabelRecord>, usize)> = pairs
        .par_chunks(PAIRS_PER_TASK)
        .map(|chunk| shard(chunk, teacher, k, temperature))
        .collect::<Result<_>>()?;
    let forward_passes = shards.iter().map(|s| s.1).sum();
    let records = shards.into_iter().flat_map(|s| s.0).collect();
    let store = SoftLabelStore::new(StoreHeader::new(k, temperature, provenance), records)?;
    Ok(Precomputed {
        store,
        forward_passes,
    })
}

fn shard(
    pairs: &[SentencePair],
    teacher: &Teacher,
    k: usize,
    temperature: f64,
) -> Result<(Vec<SoftLabelRecord>, usize)> {
    let examples: Vec<MaskedExample> = pairs
        .iter()
        .flat_map(|p| circular_replicas(p, DEFAULT_REPLICAS))
        .filter(|e| !e.masked_positions.is_empty())
        .collect();
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        for &t in &ex.masked_positions {
            rows.push((i, ex.input.target_start + t));
            keys.push((ex.pair_id, t));
        }
    }
    if rows.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let inputs: Vec<_> = examples.iter().map(|e| e.input.clone()).collect();
    let mut g = Graph::eval(&teacher.params);
    let logits = teacher.logits_at(&mut g, &inputs, &rows)?;
    let values = g.value(logits);
    let records = keys
        .iter()
        .enumerate()
        .map(|(r, &(pair_id, t))| {
            let top = extract_topk(values.row(r), k, temperature)?;
            Ok(SoftLabelRecord {
                pair_id,
                t: u16::try_from(t)
                    .map_err(|_| Error::Contract(format!("position {t} exceeds u16")))?,
                entries: top.into_iter().map(|(id, p)| (id, p as f32)).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((records, examples.len()))
}
