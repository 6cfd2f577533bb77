use cmlm_core::checkpoint::Checkpoint;
use cmlm_core::cmlm::{finetune_teacher, TeacherTrainConfig, TeacherVariant};
use cmlm_core::decode::{translate, DecodeConfig};
use cmlm_core::distill::{
    bidi_loss, bidi_targets, compound_loss, xe_loss, StudentBatch, StudentTrainer, TrainConfig,
};
use cmlm_core::error::Error;
use cmlm_core::metrics_log::MetricsLog;
use cmlm_core::model::{ModelConfig, ModelError, PositionEncoding, Student};
use cmlm_core::softlabel::{
    precompute, SoftLabelRecord, SoftLabelStore, StoreHeader, StoreProvenance,
};
use cmlm_core::tensor::gradcheck::check_gradients;
use cmlm_core::tensor::{log_softmax_slice, Graph, ParamStore, Tensor};
use cmlm_core::text::special::EOS;
use cmlm_core::text::SentencePair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn provenance() -> StoreProvenance {
    StoreProvenance {
        vocab_hash: "v".into(),
        teacher_hash: "t".into(),
        corpus_hash: "c".into(),
    }
}

fn task_pairs(n: usize, vocab: u32, reverse: bool, seed: u64) -> Vec<SentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3..=6);
            let source: Vec<u32> = (0..len).map(|_| rng.gen_range(7..vocab)).collect();
            let target = if reverse {
                source.iter().rev().copied().collect()
            } else {
                source.clone()
            };
            SentencePair {
                pair_id: i as u32,
                source,
                target,
            }
        })
        .collect()
}

/// Store with random top-`k` distributions for every target position.
fn random_store(pairs: &[SentencePair], vocab: u32, k: usize, seed: u64) -> SoftLabelStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for p in pairs {
        for t in 0..p.target.len() {
            let mut ids: Vec<u32> = (0..vocab).collect();
            for i in 0..k {
                let j = rng.gen_range(i..ids.len());
                ids.swap(i, j);
            }
            let raw: Vec<f32> = (0..k).map(|_| rng.gen_range(0.05f32..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            let mut entries: Vec<(u32, f32)> = ids[..k]
                .iter()
                .zip(&raw)
                .map(|(&id, &r)| (id, r / sum))
                .collect();
            entries.sort_by(|a, b| b.1.total_cmp(&a.1));
            records.push(SoftLabelRecord {
                pair_id: p.pair_id,
                t: t as u16,
                entries,
            });
        }
    }
    SoftLabelStore::new(StoreHeader::new(k, 10.0, provenance()), records).unwrap()
}

fn one_hot_store(pairs: &[SentencePair]) -> SoftLabelStore {
    let records = pairs
        .iter()
        .flat_map(|p| {
            p.target
                .iter()
                .enumerate()
                .map(move |(t, &y)| SoftLabelRecord {
                    pair_id: p.pair_id,
                    t: t as u16,
                    entries: vec![(y, 1.0)],
                })
        })
        .collect();
    SoftLabelStore::new(StoreHeader::new(1, 1.0, provenance()), records).unwrap()
}

fn zeroed(mut s: Student) -> Student {
    for p in s.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    s
}

fn student(vocab: usize, seed: u64) -> Student {
    Student::new(
        ModelConfig::micro(vocab),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

#[test]
fn smoothed_xe_is_log_vocab_for_uniform_student() {
    let pairs = task_pairs(3, 11, true, 1);
    let s = zeroed(student(11, 2));
    let batch = StudentBatch::new(&pairs);
    let mut g = Graph::eval(&s.params);
    let logits = batch.logits(&s, &mut g).unwrap();
    for eps in [0.0, 0.1] {
        let l = xe_loss(&mut g, logits, &batch, eps).unwrap();
        assert!((g.value(l).item() - 11f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn smoothed_target_is_the_minimizer() {
    let eps = 0.1;
    let q = [eps / 4.0, eps / 4.0, 1.0 - eps + eps / 4.0, eps / 4.0];
    let pair = SentencePair {
        pair_id: 0,
        source: vec![1],
        target: vec![],
    };
    let batch = StudentBatch::new([&pair]);
    assert_eq!(batch.targets, vec![vec![EOS]]);
    let loss_at = |logits: &[f64]| {
        let mut store = ParamStore::new();
        let id = store
            .insert("z", Tensor::new(vec![1, 4], logits.to_vec()).unwrap())
            .unwrap();
        let mut g = Graph::eval(&store);
        let z = g.param(id);
        let l = xe_loss(&mut g, z, &batch, eps).unwrap();
        let grad = g.backward(l).unwrap().get(id).unwrap().to_vec();
        (g.value(l).item(), grad)
    };
    let opt: Vec<f64> = q.iter().map(|p: &f64| p.ln()).collect();
    let (best, grad) = loss_at(&opt);
    let entropy: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
    assert!((best - entropy).abs() < 1e-12);
    assert!(best > 0.0);
    assert!(grad.iter().all(|g| g.abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let z: Vec<f64> = opt.iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect();
        assert!(loss_at(&z).0 >= best);
    }
    let confident = [0.0, 0.0, 40.0, 0.0];
    assert!(loss_at(&confident).0 > best);
}

#[test]
fn one_hot_records_reduce_to_plain_cross_entropy() {
    let pairs = task_pairs(4, 11, true, 4);
    let store = one_hot_store(&pairs);
    let s = student(11, 5);
    let batch = StudentBatch::new(&pairs);
    let mut g = Graph::eval(&s.params);
    let logits = batch.logits(&s, &mut g).unwrap();
    let xe = xe_loss(&mut g, logits, &batch, 0.0).unwrap();
    let bidi = bidi_loss(&mut g, logits, &batch, &store).unwrap();
    assert!((g.value(xe).item() - g.value(bidi).item()).abs() <= 1e-10);
}

#[test]
fn matched_uniforms_give_log_k() {
    let pairs = task_pairs(3, 8, false, 6);
    let records = pairs
        .iter()
        .flat_map(|p| {
            (0..p.target.len()).map(move |t| SoftLabelRecord {
                pair_id: p.pair_id,
                t: t as u16,
                entries: (0..8).map(|id| (id, 0.125)).collect(),
            })
        })
        .collect();
    let store = SoftLabelStore::new(StoreHeader::new(8, 1.0, provenance()), records).unwrap();
    let s = zeroed(student(8, 7));
    let only_tokens: Vec<SentencePair> = pairs.clone();
    let batch = StudentBatch::new(&only_tokens);
    let mut g = Graph::eval(&s.params);
    let logits = batch.logits(&s, &mut g).unwrap();
    let bidi = bidi_loss(&mut g, logits, &batch, &store).unwrap();
    assert!((g.value(bidi).item() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn bidi_loss_matches_scalar_reimplementation() {
    let pairs = task_pairs(6, 11, true, 8);
    let store = random_store(&pairs, 11, 4, 9);
    let s = student(11, 10);
    let batch = StudentBatch::new(&pairs);
    let mut g = Graph::eval(&s.params);
    let logits = batch.logits(&s, &mut g).unwrap();
    let bidi = bidi_loss(&mut g, logits, &batch, &store).unwrap();

    let values = g.value(logits);
    let mut total = 0.0;
    let mut rows = 0;
    let mut r = 0;
    for p in &pairs {
        for t in 0..=p.target.len() {
            let lsm = log_softmax_slice(values.row(r));
            total += if t < p.target.len() {
                let rec = store.get(p.pair_id, t).unwrap();
                -rec.entries
                    .iter()
                    .map(|&(id, pr)| pr as f64 * lsm[id as usize])
                    .sum::<f64>()
            } else {
                -lsm[EOS as usize]
            };
            rows += 1;
            r += 1;
        }
    }
    assert!((g.value(bidi).item() - total / rows as f64).abs() < 1e-10);
}

#[test]
fn missing_record_is_reported() {
    let pairs = task_pairs(2, 11, true, 11);
    let store = random_store(&pairs[..1], 11, 2, 12);
    let batch = StudentBatch::new(&pairs);
    assert!(matches!(
        bidi_targets(&batch, &store),
        Err(Error::MissingSoftLabel {
            pair_id: 1,
            position: 0
        })
    ));
    let empty = StudentBatch::new(std::iter::empty::<&SentencePair>());
    assert!(matches!(
        bidi_targets(&empty, &store),
        Err(Error::Contract(_))
    ));
}

#[test]
fn compound_boundaries_and_alpha_derivative() {
    let pairs = task_pairs(5, 11, true, 13);
    let store = random_store(&pairs, 11, 3, 14);
    let s = student(11, 15);
    let batch = StudentBatch::new(&pairs);
    let mut g = Graph::eval(&s.params);
    let logits = batch.logits(&s, &mut g).unwrap();
    let xe = xe_loss(&mut g, logits, &batch, 0.1).unwrap();
    let bidi = bidi_loss(&mut g, logits, &batch, &store).unwrap();
    let (xv, bv) = (g.value(xe).item(), g.value(bidi).item());
    let mut at = |a: f64| {
        let c = compound_loss(&mut g, xe, bidi, a).unwrap();
        g.value(c).item()
    };
    assert_eq!(at(0.0).to_bits(), xv.to_bits());
    assert_eq!(at(1.0).to_bits(), bv.to_bits());
    assert!((at(0.5) - 0.5 * (xv + bv)).abs() < 1e-15);
    let h = 1e-3;
    let d = (at(0.5 + h) - at(0.5 - h)) / (2.0 * h);
    assert!((d - (bv - xv)).abs() <= 1e-10, "{d} vs {}", bv - xv);
    assert!(matches!(
        compound_loss(&mut g, xe, bidi, 1.5),
        Err(Error::Config(_))
    ));
}

#[test]
fn compound_gradient_check_on_micro_student() {
    let pairs = task_pairs(3, 11, true, 16);
    let store = random_store(&pairs, 11, 3, 17);
    let mut s = student(11, 18);
    let probe = s.clone();
    let batch = StudentBatch::new(&pairs);
    let report = check_gradients(&mut s.params, 1e-5, None, |g| {
        let logits = batch.logits(&probe, g).map_err(to_tensor)?;
        let xe = xe_loss(g, logits, &batch, 0.1).map_err(to_tensor)?;
        let bidi = bidi_loss(g, logits, &batch, &store).map_err(to_tensor)?;
        compound_loss(g, xe, bidi, 0.5).map_err(to_tensor)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn to_tensor(e: Error) -> cmlm_core::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        Error::Model(ModelError::Tensor(t)) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn padding_free_batches_decompose_exactly() {
    let pairs = task_pairs(2, 11, true, 19);
    let s = student(11, 20);
    let loss_of = |ps: &[SentencePair]| {
        let b = StudentBatch::new(ps);
        let mut g = Graph::eval(&s.params);
        let l = b.logits(&s, &mut g).unwrap();
        let x = xe_loss(&mut g, l, &b, 0.1).unwrap();
        (g.value(x).item(), b.rows() as f64)
    };
    let (both, n) = loss_of(&pairs);
    let (a, na) = loss_of(&pairs[..1]);
    let (b, nb) = loss_of(&pairs[1..]);
    assert!((both * n - (a * na + b * nb)).abs() < 1e-12);
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        alpha: 0.5,
        temperature: 10.0,
        k: 3,
        eta: 0.5,
        warmup_steps: 50,
        total_steps: 40,
        token_budget: 40,
        eval_interval: 10,
        log_interval: 5,
        dev_max_len: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn alpha_zero_run_equals_baseline_bitwise() {
    let train = task_pairs(60, 11, true, 21);
    let dev = task_pairs(10, 11, true, 22);
    let store = random_store(&train, 11, 3, 23);
    let config = TrainConfig {
        alpha: 0.0,
        ..small_train_config()
    };
    let run = |store: Option<&SoftLabelStore>| {
        let mut t =
            StudentTrainer::new(student(11, 24), config.clone(), &train, &dev, store).unwrap();
        let mut log = MetricsLog::in_memory();
        t.run(&mut log, None).unwrap();
        let xe: Vec<String> = log
            .lines()
            .iter()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                format!("{} {} {}", v["xe"], v["compound"], v["dev_metric"])
            })
            .collect();
        (t.student().params.clone(), xe)
    };
    let (pa, la) = run(None);
    let (pb, lb) = run(Some(&store));
    assert_eq!(la, lb);
    for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
        assert!(a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn gradient_accumulation_matches_large_batch() {
    let train = task_pairs(16, 11, true, 25);
    let store = random_store(&train, 11, 3, 26);
    let config = small_train_config();
    let before = student(11, 27).params;
    let micro: Vec<StudentBatch> = train.chunks(4).map(StudentBatch::new).collect();
    let whole = vec![StudentBatch::new(&train)];
    let mut a = StudentTrainer::new(
        student(11, 27),
        TrainConfig {
            accum_steps: 4,
            ..config.clone()
        },
        &train,
        &[],
        Some(&store),
    )
    .unwrap();
    let mut b = StudentTrainer::new(student(11, 27), config, &train, &[], Some(&store)).unwrap();
    for _ in 0..3 {
        let la = a.step_on(&micro).unwrap();
        let lb = b.step_on(&whole).unwrap();
        assert!((la.compound - lb.compound).abs() <= 1e-12 * lb.compound.abs());
    }
    let (mut diff, mut norm) = (0.0, 0.0);
    let params = a.student().params.iter().zip(b.student().params.iter());
    for (((_, x), (_, y)), (_, p)) in params.zip(before.iter()) {
        for ((u, v), w) in x
            .value
            .data()
            .iter()
            .zip(y.value.data())
            .zip(p.value.data())
        {
            diff += (u - v).powi(2);
            norm += (v - w).powi(2);
        }
    }
    let rel = (diff / norm).sqrt();
    assert!(norm > 0.0 && rel < 1e-5, "{rel}");
}

#[test]
fn compound_loss_descends_monotonically() {
    let vocab = 20;
    let train: Vec<SentencePair> = task_pairs(400, vocab as u32, true, 28)
        .into_iter()
        .filter(|p| p.target.len() == 5)
        .enumerate()
        .map(|(i, p)| SentencePair {
            pair_id: i as u32,
            ..p
        })
        .collect();
    let teacher_model = ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        dropout: 0.0,
        vocab_size: vocab,
        max_len: 32,
        tie_embeddings: true,
        positions: PositionEncoding::Learned,
    };
    let teacher = finetune_teacher(
        &train,
        &[],
        TeacherVariant::Full,
        &teacher_model,
        &TeacherTrainConfig {
            total_steps: 200,
            warmup_steps: 20,
            eta: 3e-3,
            token_budget: 1000,
            ..TeacherTrainConfig::default()
        },
        &mut MetricsLog::in_memory(),
    )
    .unwrap()
    .teacher;
    let store = precompute(&train, &teacher, 8, 10.0, provenance())
        .unwrap()
        .store;
    let config = TrainConfig {
        alpha: 0.5,
        k: 8,
        temperature: 10.0,
        eta: 0.02,
        warmup_steps: 50,
        total_steps: 500,
        token_budget: 10_000,
        log_interval: 1,
        eval_interval: 1_000_000,
        ..TrainConfig::default()
    };
    let s = Student::new(
        ModelConfig {
            d_model: 16,
            d_ff: 32,
            ..ModelConfig::micro(vocab)
        },
        &mut ChaCha8Rng::seed_from_u64(29),
    )
    .unwrap();
    let mut t = StudentTrainer::new(s, config, &train, &[], Some(&store)).unwrap();
    let mut log = MetricsLog::in_memory();
    t.run(&mut log, None).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .iter()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["compound"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 500);
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] < w[0], "step {}: {} -> {}", i + 2, w[0], w[1]);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let train = task_pairs(60, 11, true, 30);
    let dev = task_pairs(8, 11, true, 31);
    let store = random_store(&train, 11, 3, 32);
    let config = TrainConfig {
        total_steps: 40,
        ..small_train_config()
    };
    let mut model = ModelConfig::micro(11);
    model.dropout = 0.1;
    let fresh = || Student::new(model.clone(), &mut ChaCha8Rng::seed_from_u64(33)).unwrap();

    let mut full =
        StudentTrainer::new(fresh(), config.clone(), &train, &dev, Some(&store)).unwrap();
    let mut full_log = MetricsLog::in_memory();
    full.run(&mut full_log, None).unwrap();

    for cut in [20, 23] {
        let mut first =
            StudentTrainer::new(fresh(), config.clone(), &train, &dev, Some(&store)).unwrap();
        let mut log = MetricsLog::in_memory();
        first.run(&mut log, Some(cut)).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        assert_eq!(ckpt.to_bytes(), bytes);
        let mut second = StudentTrainer::resume(ckpt, &train, &dev, Some(&store)).unwrap();
        second.run(&mut log, None).unwrap();
        assert_eq!(log.lines(), full_log.lines(), "cut at {cut}");
        assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }
}

#[test]
fn checkpoint_round_trip_and_config_guard() {
    let train = task_pairs(20, 11, true, 34);
    let mut t =
        StudentTrainer::new(student(11, 35), small_train_config(), &train, &[], None).unwrap();
    t.run(&mut MetricsLog::in_memory(), Some(5)).unwrap();
    let ckpt = t.checkpoint();
    let dir = std::env::temp_dir().join(format!("cmlm-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("student.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let restored = back.clone().into_student().unwrap();
    for ((_, a), (_, b)) in restored.params.iter().zip(t.student().params.iter()) {
        assert!(a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut other = ModelConfig::micro(11);
    other.heads = 4;
    let err = back.check_model(&other).unwrap_err();
    assert!(err.to_string().contains("heads: 2 != 4"), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(back.into_teacher(), Err(Error::Integrity(_))));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn store_with_other_settings_is_refused() {
    let train = task_pairs(4, 11, true, 36);
    let store = random_store(&train, 11, 2, 37);
    let err = StudentTrainer::new(
        student(11, 38),
        small_train_config(),
        &train,
        &[],
        Some(&store),
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Integrity(_)));
    let partial = random_store(&train[..2], 11, 3, 39);
    let err = StudentTrainer::new(
        student(11, 38),
        small_train_config(),
        &train,
        &[],
        Some(&partial),
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::MissingSoftLabel { .. }));
}

#[test]
fn trained_copy_student_copies() {
    let vocab = 20;
    let train = task_pairs(1500, vocab as u32, false, 40);
    let test = task_pairs(30, vocab as u32, false, 41);
    let model = ModelConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        dropout: 0.0,
        vocab_size: vocab,
        max_len: 32,
        tie_embeddings: true,
        positions: PositionEncoding::Sinusoidal,
    };
    let config = TrainConfig {
        alpha: 0.0,
        eta: 1.0,
        warmup_steps: 200,
        total_steps: 1500,
        token_budget: 300,
        lsr_epsilon: 0.0,
        eval_interval: 500,
        log_interval: 500,
        dev_max_len: 10,
        ..TrainConfig::default()
    };
    let s = Student::new(model, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut t = StudentTrainer::new(s, config, &train, &test, None).unwrap();
    t.run(&mut MetricsLog::in_memory(), None).unwrap();
    let out = t.finish().unwrap();
    let decode = DecodeConfig::new(4, 0.6, 10);
    for p in &test {
        assert_eq!(translate(&out.best, &p.source, &decode).unwrap(), p.source);
    }
    assert_eq!(out.best_metric, Some(100.0));
}
