use rand::seq::index;
use rand::Rng;

use crate::model::TeacherInput;
use crate::text::special::MASK;
use crate::text::SentencePair;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// A packed teacher input with some target tokens replaced by MASK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub pair_id: u32,
    pub input: TeacherInput,
    /// Sorted indices into the target span.
    pub masked_positions: Vec<usize>,
    /// Original tokens at `masked_positions`.
    pub labels: Vec<u32>,
}

impl MaskedExample {
    /// Masks exactly the given target positions (sorted, distinct, `< N`).
    pub fn from_positions(pair: &SentencePair, positions: Vec<usize>) -> Self {
        let mut input = TeacherInput::pack(&pair.source, &pair.target);
        let labels = positions.iter().map(|&t| pair.target[t]).collect();
        for &t in &positions {
            input.ids[input.target_start + t] = MASK;
        }
        MaskedExample {
            pair_id: pair.pair_id,
            input,
            masked_positions: positions,
            labels,
        }
    }
}

/// `max(1, round_half_up(rate * n))`, clamped to `n`.
pub fn mask_count(n: usize, rate: f64) -> usize {
    let k = (rate * n as f64 + 0.5).floor() as usize;
    k.max(1).min(n)
}

/// Replaces a uniformly sampled set of [`mask_count`] target tokens with MASK.
/// Source tokens and separators are never touched.
pub fn cmlm_mask<R: Rng + ?Sized>(pair: &SentencePair, rate: f64, rng: &mut R) -> MaskedExample {
    let n = pair.target.len();
    let mut positions = index::sample(rng, n, mask_count(n, rate)).into_vec();
    positions.sort_unstable();
    MaskedExample::from_positions(pair, positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(m: usize, n: usize) -> SentencePair {
        SentencePair {
            pair_id: 0,
            source: (0..m as u32).map(|i| 7 + i).collect(),
            target: (0..n as u32).map(|i| 100 + i).collect(),
        }
    }

    #[test]
    fn twenty_tokens_mask_three() {
        let ex = cmlm_mask(&pair(5, 20), 0.15, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ex.masked_positions.len(), 3);
        let src_span = &ex.input.ids[1..6];
        assert_eq!(src_span, &[7, 8, 9, 10, 11]);
    }

    #[test]
    fn single_token_is_always_masked() {
        let ex = cmlm_mask(&pair(3, 1), 0.15, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ex.masked_positions, vec![0]);
        assert_eq!(ex.labels, vec![100]);
        assert_eq!(ex.input.ids[ex.input.target_start], MASK);
    }
}
