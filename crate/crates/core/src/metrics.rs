//! Corpus BLEU (multi-bleu convention), smoothed sentence BLEU, ROUGE-1/2/L F1
//! and length-bucketed BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram total for one pair.
fn clipped<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

fn check_sizes(hyps: usize, refs: usize) -> Result<()> {
    if hyps == 0 {
        return Err(Error::Metric("no hypotheses to score".into()));
    }
    if hyps != refs {
        return Err(Error::Metric(format!(
            "{hyps} hypotheses but {refs} references"
        )));
    }
    Ok(())
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
        hyps: &[H],
        refs: &[R],
        max_n: usize,
    ) -> Self {
        let mut s = BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ..Default::default()
        };
        for (h, r) in hyps.iter().zip(refs) {
            let (h, r) = (h.as_ref(), r.as_ref());
            s.hyp_len += h.len();
            s.ref_len += r.len();
            for n in 1..=max_n {
                let (m, t) = clipped(h, r, n);
                s.matches[n - 1] += m;
                s.totals[n - 1] += t;
            }
        }
        s
    }

    /// Score in `[0, 100]`; zero when any precision is zero.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / self.matches.len() as f64).exp()
    }
}

/// Corpus-level BLEU with clipped counts pooled over all pairs.
pub fn corpus_bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
    hyps: &[H],
    refs: &[R],
    max_n: usize,
) -> Result<f64> {
    check_sizes(hyps.len(), refs.len())?;
    Ok(BleuStats::collect(hyps, refs, max_n).score())
}

/// Sentence BLEU with add-one smoothing of the n > 1 precisions.
pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(hyp, reference, n);
        let p = if n == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m + 1) as f64 / (t + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp.len() > reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

/// Macro-averaged F1 scores scaled to `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if hyp_total == 0 && ref_total == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    let (overlap, h_total) = clipped(hyp, reference, n);
    f1(overlap, h_total, reference.len().saturating_sub(n - 1))
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 per pair, averaged over pairs.
pub fn rouge<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
    hyps: &[H],
    refs: &[R],
) -> Result<RougeScores> {
    check_sizes(hyps.len(), refs.len())?;
    let mut sums = [0.0; 3];
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        sums[0] += rouge_n(h, r, 1);
        sums[1] += rouge_n(h, r, 2);
        sums[2] += f1(lcs_len(h, r), h.len(), r.len());
    }
    let k = 100.0 / hyps.len() as f64;
    Ok(RougeScores {
        rouge1: sums[0] * k,
        rouge2: sums[1] * k,
        rouge_l: sums[2] * k,
    })
}

/// Corpus BLEU over the pairs whose reference length lies in `[min_len, max_len]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub min_len: usize,
    pub max_len: usize,
    pub pairs: usize,
    pub bleu: f64,
}

/// Buckets pairs by reference length into bins `[1, w], [w+1, 2w], ...`
/// (empty references fall in the first bin); empty bins are omitted.
pub fn bleu_by_length<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
    hyps: &[H],
    refs: &[R],
    bucket_width: usize,
    max_n: usize,
) -> Result<Vec<LengthBucket>> {
    check_sizes(hyps.len(), refs.len())?;
    if bucket_width == 0 {
        return Err(Error::Config("bucket width must be positive".into()));
    }
    let mut bins: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in refs.iter().enumerate() {
        let len = r.as_ref().len();
        bins.entry(len.saturating_sub(1) / bucket_width)
            .or_default()
            .push(i);
    }
    Ok(bins
        .into_iter()
        .map(|(b, idx)| {
            let h: Vec<&[T]> = idx.iter().map(|&i| hyps[i].as_ref()).collect();
            let r: Vec<&[T]> = idx.iter().map(|&i| refs[i].as_ref()).collect();
            LengthBucket {
                min_len: b * bucket_width + 1,
                max_len: (b + 1) * bucket_width,
                pairs: idx.len(),
                bleu: BleuStats::collect(&h, &r, max_n).score(),
            }
        })
        .collect())
}

/// Splits a line into whitespace tokens.
pub fn tokens(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}
