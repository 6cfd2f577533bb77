use cmlm_core::cmlm::{
    cmlm_loss, cmlm_mask, finetune_teacher, mask_count, masked_accuracy, masked_cross_entropy,
    MaskedExample, TeacherTrainConfig, TeacherVariant,
};
use cmlm_core::metrics_log::MetricsLog;
use cmlm_core::model::{ModelConfig, PositionEncoding, Teacher, TeacherAttention};
use cmlm_core::optim::triangular_lr;
use cmlm_core::tensor::Graph;
use cmlm_core::text::special::MASK;
use cmlm_core::text::SentencePair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reversal_pairs(n: usize, vocab: u32, seed: u64) -> Vec<SentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3..=6);
            let source: Vec<u32> = (0..len).map(|_| rng.gen_range(7..vocab)).collect();
            let target = source.iter().rev().copied().collect();
            SentencePair {
                pair_id: i as u32,
                source,
                target,
            }
        })
        .collect()
}

fn teacher_config(vocab: usize, d: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: d,
        heads: 4,
        d_ff: 2 * d,
        dropout: 0.0,
        vocab_size: vocab,
        max_len: 32,
        tie_embeddings: true,
        positions: PositionEncoding::Learned,
    }
}

#[test]
fn mask_count_rounds_half_up_with_floor_one() {
    assert_eq!(mask_count(20, 0.15), 3);
    assert_eq!(mask_count(1, 0.15), 1);
    assert_eq!(mask_count(10, 0.15), 2);
    for n in 1..=100usize {
        assert_eq!(mask_count(n, 0.15), ((15 * n + 50) / 100).max(1));
    }
}

#[test]
fn per_position_mask_frequency_is_fifteen_percent() {
    let pair = SentencePair {
        pair_id: 0,
        source: vec![7, 8, 9],
        target: (0..100).map(|i| 7 + (i % 13)).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut hits = vec![0usize; 100];
    let samples = 10_000;
    for _ in 0..samples {
        let ex = cmlm_mask(&pair, 0.15, &mut rng);
        assert_eq!(&ex.input.ids[1..4], &[7, 8, 9]);
        for t in ex.masked_positions {
            hits[t] += 1;
        }
    }
    let pooled = hits.iter().sum::<usize>() as f64 / (100 * samples) as f64;
    assert!((pooled - 0.15).abs() < 1e-12);
    for h in hits {
        let freq = h as f64 / samples as f64;
        assert!((freq - 0.15).abs() <= 0.01, "{freq}");
    }
}

fn zeroed_teacher(vocab: usize) -> Teacher {
    let mut t = Teacher::new(
        teacher_config(vocab, 8),
        TeacherAttention::Bidirectional,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for p in t.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    t
}

#[test]
fn uniform_teacher_loss_is_log_vocab() {
    let teacher = zeroed_teacher(20);
    let pairs = reversal_pairs(4, 20, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let examples: Vec<_> = pairs.iter().map(|p| cmlm_mask(p, 0.15, &mut rng)).collect();
    let mut g = Graph::eval(&teacher.params);
    let loss = cmlm_loss(&teacher, &mut g, &examples).unwrap();
    assert!((g.value(loss).item() - 20f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_teacher_loss_vanishes() {
    let mut teacher = zeroed_teacher(20);
    let pair = SentencePair {
        pair_id: 0,
        source: vec![9, 10],
        target: vec![11, 11, 11],
    };
    let bias = teacher.params.id("output.bias").unwrap();
    teacher.params.get_mut(bias).value.data_mut()[11] = 60.0;
    let ex = cmlm_mask(&pair, 0.15, &mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::eval(&teacher.params);
    let loss = cmlm_loss(&teacher, &mut g, &[ex]).unwrap();
    assert!(g.value(loss).item() < 1e-20);
}

#[test]
fn gradient_flows_only_through_masked_logits() {
    let teacher = Teacher::new(
        teacher_config(20, 8),
        TeacherAttention::Bidirectional,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let pairs = reversal_pairs(3, 20, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let examples: Vec<_> = pairs.iter().map(|p| cmlm_mask(p, 0.15, &mut rng)).collect();
    let inputs: Vec<_> = examples.iter().map(|e| e.input.clone()).collect();

    let mut g = Graph::eval(&teacher.params);
    let logits = teacher.logits(&mut g, &inputs).unwrap();
    let loss = masked_cross_entropy(&mut g, logits, &examples).unwrap();
    let dlogits = g.grad_of(loss, logits).unwrap();
    let direct = {
        let mut g2 = Graph::eval(&teacher.params);
        let l = cmlm_loss(&teacher, &mut g2, &examples).unwrap();
        g2.value(l).item()
    };
    assert!((g.value(loss).item() - direct).abs() < 1e-12);

    let v = 20;
    let mut offset = 0;
    for ex in &examples {
        for p in 0..ex.input.len() {
            let r = offset + p;
            let nonzero = dlogits[r * v..(r + 1) * v].iter().any(|&x| x != 0.0);
            let masked = p >= ex.input.target_start
                && ex.masked_positions.contains(&(p - ex.input.target_start));
            assert_eq!(nonzero, masked, "row {r}");
        }
        offset += ex.input.len();
    }
    for ex in &examples {
        for &t in &ex.masked_positions {
            assert_eq!(ex.input.ids[ex.input.target_start + t], MASK);
        }
    }
}

#[test]
fn triangular_schedule_peak_and_end() {
    assert_eq!(triangular_lr(100, 5e-4, 100, 1000), 5e-4);
    assert_eq!(triangular_lr(1000, 5e-4, 100, 1000), 0.0);
    assert!(triangular_lr(50, 5e-4, 100, 1000) < 5e-4);
}

#[test]
fn teacher_learns_reversal_masked_tokens() {
    let vocab = 20;
    let train = reversal_pairs(2000, vocab as u32, 11);
    let dev = reversal_pairs(100, vocab as u32, 12);
    let config = TeacherTrainConfig {
        eta: 2e-3,
        warmup_steps: 200,
        total_steps: 5000,
        token_budget: 256,
        eval_interval: 250,
        log_interval: 250,
        seed: 3,
        target_accuracy: Some(0.95),
        ..TeacherTrainConfig::default()
    };
    let mut log = MetricsLog::in_memory();
    let out = finetune_teacher(
        &train,
        &dev,
        TeacherVariant::Full,
        &teacher_config(vocab, 32),
        &config,
        &mut log,
    )
    .unwrap();
    assert!(out.steps <= 5000);
    assert!(
        out.best_accuracy > 0.9,
        "dev masked accuracy {}",
        out.best_accuracy
    );
    let again = masked_accuracy(&out.teacher, &dev).unwrap();
    assert_eq!(again, out.best_accuracy);
    assert!(log.lines().iter().any(|l| l.contains("masked_accuracy")));

    let mut best_tv: f64 = 0.0;
    for pair in &dev {
        let n = pair.target.len();
        for t in 0..n - 1 {
            let base = MaskedExample::from_positions(pair, vec![t]);
            let mut perturbed = base.clone();
            let at = perturbed.input.target_start + t + 1;
            perturbed.input.ids[at] = if perturbed.input.ids[at] == 7 { 8 } else { 7 };
            let probs = |ex: &MaskedExample| {
                let mut g = Graph::eval(&out.teacher.params);
                let l = out
                    .teacher
                    .logits_at(
                        &mut g,
                        &[ex.input.clone()],
                        &[(0, ex.input.target_start + t)],
                    )
                    .unwrap();
                let p = g.softmax(l).unwrap();
                g.value(p).data().to_vec()
            };
            let (p, q) = (probs(&base), probs(&perturbed));
            let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            best_tv = best_tv.max(tv);
        }
    }
    println!("max total variation under right-context perturbation: {best_tv:.4}");
    assert!(best_tv > 0.1);
}
