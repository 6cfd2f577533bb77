//! Greedy and beam-search decoding with GNMT length normalization.

use crate::error::Result;
use crate::model::Student;
use crate::tensor::{log_softmax_slice, Graph};
use crate::text::special::{BOS, CLS, EOS, MASK, PAD, SEP};

/// `((5 + length) / 6)^p`.
pub fn length_penalty(length: usize, p: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(p)
}

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// One row of `vocab_size` log-probabilities per prefix. Prefixes exclude BOS.
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub penalty: f64,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub eos: u32,
    /// Tokens that may never be generated.
    pub banned: Vec<u32>,
}

impl DecodeConfig {
    pub fn new(beam: usize, penalty: f64, max_len: usize) -> Self {
        DecodeConfig {
            beam,
            penalty,
            max_len,
            eos: EOS,
            banned: vec![PAD, BOS, MASK, CLS, SEP],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; ends with EOS when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, penalty: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len().max(1), penalty)
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[u32] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Beam search over the `beam` best continuations of all live hypotheses.
/// Candidates ending in EOS retire with their penalized score; the search
/// stops once no live hypothesis can still beat the best retired one.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    config: &DecodeConfig,
) -> Result<Hypothesis> {
    let v = scorer.vocab_size();
    let allowed: Vec<bool> = (0..v as u32).map(|t| !config.banned.contains(&t)).collect();
    let beam = config.beam.max(1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut best: Option<Hypothesis> = None;
    for _ in 0..config.max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let rows = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * v);
        for (i, row) in rows.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                if allowed[t] {
                    cands.push((live[i].log_prob + lp, i, t as u32));
                }
            }
        }
        let order = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if cands.len() > beam {
            cands.select_nth_unstable_by(beam - 1, order);
            cands.truncate(beam);
        }
        cands.sort_by(order);
        let mut next = Vec::with_capacity(beam);
        for (lp, i, t) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(t);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: t == config.eos,
            };
            if h.finished {
                if best
                    .as_ref()
                    .is_none_or(|b| h.score(config.penalty) > b.score(config.penalty))
                {
                    best = Some(h);
                }
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if let Some(b) = &best {
            let bound = length_penalty(config.max_len, config.penalty);
            let best_live = live
                .iter()
                .map(|h| h.log_prob / bound)
                .fold(f64::NEG_INFINITY, f64::max);
            if b.score(config.penalty) >= best_live {
                break;
            }
        }
    }
    Ok(match best {
        Some(b) => b,
        None => live
            .into_iter()
            .max_by(|a, b| a.score(config.penalty).total_cmp(&b.score(config.penalty)))
            .unwrap_or(Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                finished: false,
            }),
    })
}

/// Argmax decoding, identical to a beam of one.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, config: &DecodeConfig) -> Result<Hypothesis> {
    beam_search(
        scorer,
        &DecodeConfig {
            beam: 1,
            ..config.clone()
        },
    )
}

/// Scores prefixes with a student conditioned on one source sentence.
pub struct StudentScorer<'a> {
    student: &'a Student,
    source: Vec<u32>,
}

impl<'a> StudentScorer<'a> {
    pub fn new(student: &'a Student, source: &[u32]) -> Self {
        StudentScorer {
            student,
            source: source.to_vec(),
        }
    }
}

impl StepScorer for StudentScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.student.config().vocab_size
    }

    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::eval(&self.student.params);
        let enc = self.student.encode(&mut g, &[self.source.as_slice()])?;
        let inputs: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let hidden = self
            .student
            .decode(&mut g, &enc, &refs, &vec![0; refs.len()])?;
        let mut last = Vec::with_capacity(refs.len());
        let mut at = 0;
        for p in &refs {
            at += p.len();
            last.push(at - 1);
        }
        let h = g.select_rows(hidden, &last)?;
        let logits = self.student.project(&mut g, h)?;
        let values = g.value(logits);
        Ok((0..refs.len())
            .map(|r| log_softmax_slice(values.row(r)))
            .collect())
    }
}

/// Decodes one source sentence; returns tokens without EOS.
pub fn translate(student: &Student, source: &[u32], config: &DecodeConfig) -> Result<Vec<u32>> {
    let mut scorer = StudentScorer::new(student, source);
    Ok(beam_search(&mut scorer, config)?.output().to_vec())
}

/// Greedy decoding of many sources at once, one graph per step.
pub fn greedy_batch(
    student: &Student,
    sources: &[&[u32]],
    config: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    let v = student.config().vocab_size;
    let allowed: Vec<bool> = (0..v as u32).map(|t| !config.banned.contains(&t)).collect();
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); sources.len()];
    let mut active: Vec<usize> = (0..sources.len()).collect();
    for _ in 0..config.max_len {
        if active.is_empty() {
            break;
        }
        let mut g = Graph::eval(&student.params);
        let srcs: Vec<&[u32]> = active.iter().map(|&i| sources[i]).collect();
        let enc = student.encode(&mut g, &srcs)?;
        let inputs: Vec<Vec<u32>> = active
            .iter()
            .map(|&i| std::iter::once(BOS).chain(out[i].iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let memory: Vec<usize> = (0..refs.len()).collect();
        let hidden = student.decode(&mut g, &enc, &refs, &memory)?;
        let mut last = Vec::with_capacity(refs.len());
        let mut at = 0;
        for p in &refs {
            at += p.len();
            last.push(at - 1);
        }
        let h = g.select_rows(hidden, &last)?;
        let logits = student.project(&mut g, h)?;
        let values = g.value(logits);
        let mut still = Vec::new();
        for (r, &i) in active.iter().enumerate() {
            let row = values.row(r);
            let t = (0..v)
                .filter(|&t| allowed[t])
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(config.eos as usize) as u32;
            if t == config.eos {
                continue;
            }
            out[i].push(t);
            still.push(i);
        }
        active = still;
    }
    Ok(out)
}
