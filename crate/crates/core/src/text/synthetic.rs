//! Synthetic parallel corpora with exactly known input-output rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParallelText;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reversal,
}

/// Random word sequences over `words` symbols `w0, w1, ...` with a fixed rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a target token is replaced by a uniformly random word
    /// when generating noisy data.
    pub noise: f64,
}

impl SyntheticTask {
    pub fn word(i: usize) -> String {
        format!("w{i}")
    }

    /// The clean target for a source under this task's rule.
    pub fn apply_rule<T: Clone>(&self, source: &[T]) -> Vec<T> {
        match self.kind {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reversal => source.iter().rev().cloned().collect(),
        }
    }

    /// `n` pairs; target tokens are corrupted at rate `noise` when `noisy`.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, noisy: bool, rng: &mut R) -> ParallelText {
        let mut text = ParallelText::default();
        for _ in 0..n {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..self.words)).collect();
            let mut tgt = self.apply_rule(&src);
            if noisy && self.noise > 0.0 {
                for t in &mut tgt {
                    if rng.gen::<f64>() < self.noise {
                        *t = rng.gen_range(0..self.words);
                    }
                }
            }
            let join = |ids: &[usize]| {
                ids.iter()
                    .map(|&i| Self::word(i))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            text.source.push(join(&src));
            text.target.push(join(&tgt));
        }
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clean_reversal_follows_rule() {
        let task = SyntheticTask {
            kind: TaskKind::Reversal,
            words: 10,
            min_len: 2,
            max_len: 6,
            noise: 0.5,
        };
        let text = task.generate(20, false, &mut ChaCha8Rng::seed_from_u64(1));
        for (s, t) in text.source.iter().zip(&text.target) {
            let s: Vec<&str> = s.split(' ').collect();
            let t: Vec<&str> = t.split(' ').collect();
            assert_eq!(task.apply_rule(&s), t);
        }
    }

    #[test]
    fn noise_corrupts_some_targets() {
        let task = SyntheticTask {
            kind: TaskKind::Copy,
            words: 50,
            min_len: 8,
            max_len: 8,
            noise: 0.2,
        };
        let text = task.generate(200, true, &mut ChaCha8Rng::seed_from_u64(2));
        let changed = text
            .source
            .iter()
            .zip(&text.target)
            .flat_map(|(s, t)| s.split(' ').zip(t.split(' ')).map(|(a, b)| a != b))
            .filter(|c| *c)
            .count() as f64
            / 1600.0;
        assert!((changed - 0.2 * 49.0 / 50.0).abs() < 0.03, "{changed}");
    }
}
