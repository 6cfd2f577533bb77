use cmlm_core::decode::{
    beam_search, greedy, greedy_batch, length_penalty, translate, DecodeConfig, StepScorer,
    StudentScorer,
};
use cmlm_core::error::Error;
use cmlm_core::metrics::{bleu_by_length, corpus_bleu, rouge, sentence_bleu, tokens};
use cmlm_core::model::{ModelConfig, Student};
use cmlm_core::tensor::{log_softmax_slice, Graph};
use cmlm_core::text::special::{BOS, EOS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const V: usize = 6;
const MAX_LEN: usize = 4;

fn micro_student(seed: u64) -> Student {
    Student::new(ModelConfig::micro(V), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Every EOS-terminated sequence of at most `MAX_LEN` tokens with its
/// penalized score, from one teacher-forced pass per sequence.
fn enumerate(student: &Student, source: &[u32], p: f64) -> Vec<(Vec<u32>, f64)> {
    let mut seqs: Vec<Vec<u32>> = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..MAX_LEN {
        let mut next = Vec::new();
        for pre in &frontier {
            for t in 0..V as u32 {
                let mut s = pre.clone();
                s.push(t);
                if t == EOS {
                    seqs.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    seqs.into_iter()
        .map(|s| {
            let input: Vec<u32> = std::iter::once(BOS)
                .chain(s[..s.len() - 1].iter().copied())
                .collect();
            let mut g = Graph::eval(&student.params);
            let logits = student.forward(&mut g, &[source], &[&input]).unwrap();
            let values = g.value(logits);
            let lp: f64 = s
                .iter()
                .enumerate()
                .map(|(i, &t)| log_softmax_slice(values.row(i))[t as usize])
                .sum();
            let score = lp / length_penalty(s.len(), p);
            (s, score)
        })
        .collect()
}

#[test]
fn length_penalty_values() {
    assert_eq!(length_penalty(1, 0.6), 1.0);
    assert_eq!(length_penalty(1, 3.0), 1.0);
    for l in 1..30 {
        assert_eq!(length_penalty(l, 0.0), 1.0);
    }
    assert!((length_penalty(19, 0.6) - 2.297_396_709_994_069_8).abs() < 1e-12);
}

#[test]
fn exhaustive_beam_matches_brute_force() {
    let exhaustive = V.pow(MAX_LEN as u32);
    let mut monotone_violations = 0;
    for seed in 0..100u64 {
        let student = micro_student(1000 + seed);
        let source: &[u32] = &[(seed % 4) as u32 + 1, 3, 5];
        let all = enumerate(&student, source, 0.6);
        let (best_seq, best_score) = all
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .unwrap();
        let config = DecodeConfig {
            banned: vec![],
            ..DecodeConfig::new(exhaustive, 0.6, MAX_LEN)
        };
        let hyp = beam_search(&mut StudentScorer::new(&student, source), &config).unwrap();
        assert!(hyp.finished);
        assert!((hyp.score(0.6) - best_score).abs() < 1e-9, "seed {seed}");
        let runner_up = all
            .iter()
            .filter(|s| s.0 != best_seq)
            .map(|s| s.1)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_score - runner_up > 1e-9 {
            assert_eq!(hyp.tokens, best_seq, "seed {seed}");
        }

        let mut prev = f64::NEG_INFINITY;
        for beam in [1, 2, 3, 4, 8, 16, exhaustive] {
            let c = DecodeConfig {
                beam,
                ..config.clone()
            };
            let h = beam_search(&mut StudentScorer::new(&student, source), &c).unwrap();
            let s = if h.finished {
                h.score(0.6)
            } else {
                f64::NEG_INFINITY
            };
            if s < prev - 1e-12 {
                monotone_violations += 1;
            }
            prev = prev.max(s);
        }
    }
    assert_eq!(monotone_violations, 0);
}

#[test]
fn beam_of_one_is_greedy_argmax() {
    for seed in 0..20u64 {
        let student =
            Student::new(ModelConfig::micro(11), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let source: &[u32] = &[7, 8, 9, 10];
        let config = DecodeConfig::new(1, 0.6, 8);
        let beam = beam_search(&mut StudentScorer::new(&student, source), &config).unwrap();
        let greedy_hyp = greedy(&mut StudentScorer::new(&student, source), &config).unwrap();
        assert_eq!(beam, greedy_hyp);

        let mut manual = Vec::new();
        let mut scorer = StudentScorer::new(&student, source);
        for _ in 0..config.max_len {
            let row = &scorer.log_probs(&[manual.clone()]).unwrap()[0];
            let t = (0..11u32)
                .filter(|t| !config.banned.contains(t))
                .max_by(|&a, &b| row[a as usize].total_cmp(&row[b as usize]).then(b.cmp(&a)))
                .unwrap();
            if t == EOS {
                break;
            }
            manual.push(t);
        }
        assert_eq!(beam.output(), manual.as_slice());
        let batch = greedy_batch(&student, &[source, &[9, 9]], &config).unwrap();
        assert_eq!(batch[0], manual);
        assert_eq!(translate(&student, source, &config).unwrap(), manual);
    }
}

#[test]
fn bleu_fixtures() {
    let h = [tokens("the cat sat")];
    let r = [tokens("the cat sat down")];
    assert_eq!(corpus_bleu(&h, &r, 4).unwrap(), 0.0);
    let b3 = corpus_bleu(&h, &r, 3).unwrap();
    assert!((b3 - 71.653_131_057_378_93).abs() < 1e-4, "{b3}");
    let same = [tokens("a b c d e"), tokens("x y z w")];
    assert_eq!(corpus_bleu(&same, &same, 4).unwrap(), 100.0);
    let empty: [Vec<&str>; 0] = [];
    assert!(matches!(
        corpus_bleu(&empty, &empty, 4),
        Err(Error::Metric(_))
    ));
    assert!(matches!(corpus_bleu(&same, &r, 4), Err(Error::Metric(_))));
}

#[test]
fn sentence_bleu_is_smoothed() {
    let s = sentence_bleu(&tokens("the cat sat on"), &tokens("the cat sat down"), 4);
    let expected = 100.0 * (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((s - expected).abs() < 1e-9, "{s}");
    let short = sentence_bleu(&tokens("the cat sat"), &tokens("the cat sat down"), 4);
    assert!((short - 71.653_131_057_378_93).abs() < 1e-9);
    assert_eq!(sentence_bleu(&tokens("a b"), &tokens("c d"), 4), 0.0);
}

#[test]
fn rouge_fixtures() {
    let id = rouge(&[tokens("a b c")], &[tokens("a b c")]).unwrap();
    assert_eq!((id.rouge1, id.rouge2, id.rouge_l), (100.0, 100.0, 100.0));
    let dis = rouge(&[tokens("a b c")], &[tokens("d e")]).unwrap();
    assert_eq!((dis.rouge1, dis.rouge2, dis.rouge_l), (0.0, 0.0, 0.0));
    let s = rouge(&[tokens("a b c")], &[tokens("a c")]).unwrap();
    assert!((s.rouge1 - 80.0).abs() < 1e-4);
    assert!((s.rouge_l - 80.0).abs() < 1e-4);
    assert_eq!(s.rouge2, 0.0);
}

#[test]
fn length_buckets_partition_and_separate() {
    let hyps = [tokens("a b"), tokens("q r s t u v"), tokens("c d e")];
    let refs = [tokens("a b"), tokens("a b c d e f"), tokens("c d e")];
    let one = bleu_by_length(&hyps, &refs, 100, 4).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].bleu, corpus_bleu(&hyps, &refs, 4).unwrap());
    let split = bleu_by_length(
        &[tokens("a b c d"), tokens("q r s t u v")],
        &[tokens("a b c d"), tokens("a b c d e f")],
        4,
        4,
    )
    .unwrap();
    assert_eq!(split.len(), 2);
    assert_eq!(
        (split[0].min_len, split[0].max_len, split[0].bleu),
        (1, 4, 100.0)
    );
    assert_eq!(
        (split[1].min_len, split[1].max_len, split[1].bleu),
        (5, 8, 0.0)
    );
    let three = bleu_by_length(&hyps, &refs, 2, 4).unwrap();
    assert_eq!(three.iter().map(|b| b.pairs).sum::<usize>(), 3);
    assert_eq!(
        three.iter().map(|b| b.min_len).collect::<Vec<_>>(),
        vec![1, 3, 5]
    );
}

proptest! {
    #[test]
    fn bleu_is_permutation_invariant(
        corpus in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..9), prop::collection::vec(0u8..6, 1..9)),
            1..20,
        ),
        seed in any::<u64>(),
    ) {
        let (h, r): (Vec<Vec<u8>>, Vec<Vec<u8>>) = corpus.iter().cloned().unzip();
        let mut idx: Vec<usize> = (0..h.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let hp: Vec<&[u8]> = idx.iter().map(|&i| h[i].as_slice()).collect();
        let rp: Vec<&[u8]> = idx.iter().map(|&i| r[i].as_slice()).collect();
        prop_assert_eq!(corpus_bleu(&h, &r, 4).unwrap(), corpus_bleu(&hp, &rp, 4).unwrap());
        let identity = if h.iter().any(|x| x.len() >= 4) { 100.0 } else { 0.0 };
        prop_assert_eq!(corpus_bleu(&h, &h, 4).unwrap(), identity);
        let self_rouge = rouge(&h, &h).unwrap();
        prop_assert!((self_rouge.rouge_l - 100.0).abs() < 1e-9);
    }
}
