use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::special::PAD;
use super::{SentencePair, TextError};

pub const DEFAULT_BUCKET_WIDTH: usize = 4;

/// Row-major `[rows, width]` id matrix padded with PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl PaddedIds {
    pub fn from_rows<'a, I: IntoIterator<Item = &'a [u32]>>(rows: I) -> Self {
        let rows: Vec<&[u32]> = rows.into_iter().collect();
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in &rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, width - r.len()));
        }
        PaddedIds {
            ids,
            lens: rows.iter().map(|r| r.len()).collect(),
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    /// Unpadded row.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.width..i * self.width + self.lens[i]]
    }

    /// `true` exactly where the matrix holds padding.
    pub fn padding_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.ids.len());
        for &len in &self.lens {
            mask.extend((0..self.width).map(|j| j >= len));
        }
        mask
    }
}

/// Pairs of similar target length, padded, within a token budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub pair_ids: Vec<u32>,
    /// Positions of the pairs in the slice the batch was made from.
    pub indices: Vec<usize>,
    pub source: PaddedIds,
    pub target: PaddedIds,
    /// Non-pad target tokens.
    pub token_count: usize,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair], indices: Vec<usize>) -> Self {
        let source = PaddedIds::from_rows(indices.iter().map(|&i| pairs[i].source.as_slice()));
        let target = PaddedIds::from_rows(indices.iter().map(|&i| pairs[i].target.as_slice()));
        Batch {
            pair_ids: indices.iter().map(|&i| pairs[i].pair_id).collect(),
            token_count: target.lens.iter().sum(),
            indices,
            source,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// [`make_batches_with_width`] with the default bucket width of 4.
pub fn make_batches(
    pairs: &[SentencePair],
    token_budget: usize,
    seed: u64,
) -> Result<Vec<Batch>, TextError> {
    make_batches_with_width(pairs, token_budget, seed, DEFAULT_BUCKET_WIDTH)
}

/// Buckets pairs by target length (`(N - 1) / bucket_width`), shuffles within
/// buckets, fills batches greedily up to `token_budget` target tokens, then
/// shuffles the batch order. Every pair lands in exactly one batch.
pub fn make_batches_with_width(
    pairs: &[SentencePair],
    token_budget: usize,
    seed: u64,
    bucket_width: usize,
) -> Result<Vec<Batch>, TextError> {
    let width = bucket_width.max(1);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.target.len() > token_budget {
            return Err(TextError::OverBudget {
                pair_id: p.pair_id,
                len: p.target.len(),
                budget: token_budget,
            });
        }
        buckets
            .entry(p.target.len().saturating_sub(1) / width)
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (_, mut members) in buckets {
        members.shuffle(&mut rng);
        let mut current = Vec::new();
        let mut tokens = 0;
        for i in members {
            let n = pairs[i].target.len();
            if tokens + n > token_budget && !current.is_empty() {
                groups.push(std::mem::take(&mut current));
                tokens = 0;
            }
            current.push(i);
            tokens += n;
        }
        if !current.is_empty() {
            groups.push(current);
        }
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|g| Batch::from_pairs(pairs, g))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: u32, n: usize) -> SentencePair {
        SentencePair {
            pair_id: id,
            source: vec![7; n],
            target: vec![8; n],
        }
    }

    #[test]
    fn exact_fit_makes_one_batch() {
        let pairs = vec![pair(0, 3), pair(1, 3), pair(2, 4)];
        let batches = make_batches(&pairs, 10, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].token_count, 10);
    }

    #[test]
    fn over_budget_pair_is_named() {
        let pairs = vec![pair(0, 3), pair(41, 12)];
        match make_batches(&pairs, 10, 0) {
            Err(TextError::OverBudget { pair_id: 41, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn padding_mask_marks_pad_positions() {
        let pairs = vec![pair(0, 2), pair(1, 4)];
        let b = Batch::from_pairs(&pairs, vec![0, 1]);
        assert_eq!(
            b.target.padding_mask(),
            vec![false, false, true, true, false, false, false, false]
        );
        for (id, pad) in b.target.ids.iter().zip(b.target.padding_mask()) {
            assert_eq!(*id == PAD, pad);
        }
        assert_eq!(b.target.row(0), &[8, 8]);
    }

    #[test]
    fn same_seed_same_batches() {
        let pairs: Vec<_> = (0..50)
            .map(|i| pair(i, 1 + (i as usize * 7) % 13))
            .collect();
        assert_eq!(
            make_batches(&pairs, 30, 5).unwrap(),
            make_batches(&pairs, 30, 5).unwrap()
        );
        assert_ne!(
            make_batches(&pairs, 30, 5).unwrap(),
            make_batches(&pairs, 30, 6).unwrap()
        );
    }
}
