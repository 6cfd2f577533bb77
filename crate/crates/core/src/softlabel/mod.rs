//! Teacher soft targets: circular masking, top-K truncation with a teacher-side
//! temperature, and the on-disk record store.

mod precompute;
mod store;

pub use precompute::{precompute, Precomputed};
pub use store::{SoftLabelRecord, SoftLabelStore, StoreHeader, StoreProvenance, STORE_VERSION};

use crate::cmlm::MaskedExample;
use crate::error::{Error, Result};
use crate::tensor::softmax_slice;
use crate::text::SentencePair;

pub const DEFAULT_REPLICAS: usize = 7;
pub const DEFAULT_K: usize = 8;

/// `replicas` copies of the pair where copy `r` masks every target position
/// `t` with `t % replicas == r`. Copies beyond the target length mask nothing.
pub fn circular_replicas(pair: &SentencePair, replicas: usize) -> Vec<MaskedExample> {
    let n = pair.target.len();
    (0..replicas)
        .map(|r| {
            let positions = (r..n).step_by(replicas.max(1)).collect();
            MaskedExample::from_positions(pair, positions)
        })
        .collect()
}

/// The `k` most probable tokens of `softmax(logits / temperature)`, sorted by
/// probability (ties by lower id) and renormalized to sum to one.
pub fn extract_topk(logits: &[f64], k: usize, temperature: f64) -> Result<Vec<(u32, f64)>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!(
            "top-k must be in [1, {}], got {k}",
            logits.len()
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax_slice(&scaled);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    Ok(order
        .into_iter()
        .map(|i| (i as u32, probs[i] / mass))
        .collect())
}

/// Shannon entropy in nats of a probability list.
pub fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(n: usize) -> SentencePair {
        SentencePair {
            pair_id: 3,
            source: vec![7, 8],
            target: (0..n as u32).map(|i| 10 + i).collect(),
        }
    }

    #[test]
    fn fourteen_tokens_two_per_replica() {
        let reps = circular_replicas(&pair(14), 7);
        assert_eq!(reps.len(), 7);
        let mut seen = vec![0; 14];
        for (r, ex) in reps.iter().enumerate() {
            assert_eq!(ex.masked_positions, vec![r, r + 7]);
            for &t in &ex.masked_positions {
                seen[t] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn short_target_leaves_trailing_replicas_empty() {
        let reps = circular_replicas(&pair(3), 7);
        for (r, ex) in reps.iter().enumerate() {
            let expect: Vec<usize> = if r < 3 { vec![r] } else { vec![] };
            assert_eq!(ex.masked_positions, expect);
        }
    }

    #[test]
    fn equal_logits_keep_lowest_ids() {
        let top = extract_topk(&[0.5; 10], 8, 1.0).unwrap();
        let ids: Vec<u32> = top.iter().map(|e| e.0).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        assert!(top.iter().all(|e| (e.1 - 0.125).abs() < 1e-15));
    }

    #[test]
    fn two_way_closed_form() {
        let mut logits = vec![0.0; 6];
        logits[0] = 2.0;
        logits[1] = 1.0;
        let top = extract_topk(&logits, 2, 1.0).unwrap();
        assert_eq!((top[0].0, top[1].0), (0, 1));
        assert!((top[0].1 - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((top[1].1 - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature_and_k() {
        assert!(matches!(
            extract_topk(&[1.0, 2.0], 1, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            extract_topk(&[1.0, 2.0], 1, -1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            extract_topk(&[1.0, 2.0], 3, 1.0),
            Err(Error::Config(_))
        ));
    }
}
