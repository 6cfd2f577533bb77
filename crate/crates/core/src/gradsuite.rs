//! Finite-difference checks over every differentiable op and both micro models.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmlm::{cmlm_loss, MaskedExample};
use crate::distill::{bidi_loss, compound_loss, xe_loss, StudentBatch};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelError, PositionEncoding, Student, Teacher, TeacherAttention};
use crate::softlabel::{SoftLabelRecord, SoftLabelStore, StoreHeader, StoreProvenance};
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{
    AttentionLayout, AttentionMask, Graph, Init, ParamStore, SoftTargets, Tensor, TensorError, Var,
};
use crate::text::SentencePair;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn as_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) | Error::Model(ModelError::Tensor(t)) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn p(g: &mut Graph<'_>, name: &str) -> Var {
    let id = g.params().id(name).expect("declared parameter");
    g.param(id)
}

/// `sum(r^T y c)` with fixed random `r`, `c`, so upstream gradients vary per entry.
fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let (m, n) = (g.shape(y)[0], g.shape(y)[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::new(
        vec![1, m],
        (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let c = Tensor::new(
        vec![n, 1],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let (r, c) = (g.constant(r), g.constant(c));
    let ry = g.matmul(r, y)?;
    let ryc = g.matmul(ry, c)?;
    Ok(g.sum(ryc))
}

fn store_of(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.declare_with(name, shape, Init::Uniform(1.0), &mut rng);
    }
    store
}

fn case<F>(name: &'static str, mut store: ParamStore, f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<'_>) -> crate::tensor::Result<Var>,
{
    let report = check_gradients(&mut store, STEP, None, f)?;
    Ok(GradCase {
        name,
        checked: report.checked,
        max_rel_err: report.max_rel_err,
        passed: report.passes(TOLERANCE),
    })
}

fn micro_pairs() -> Vec<SentencePair> {
    vec![
        SentencePair {
            pair_id: 0,
            source: vec![7, 8, 9],
            target: vec![9, 8, 7],
        },
        SentencePair {
            pair_id: 1,
            source: vec![10, 7],
            target: vec![7, 10],
        },
    ]
}

fn micro_store(pairs: &[SentencePair]) -> Result<SoftLabelStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut records = Vec::new();
    for pair in pairs {
        for t in 0..pair.target.len() {
            let a: f32 = rng.gen_range(0.2..0.8);
            records.push(SoftLabelRecord {
                pair_id: pair.pair_id,
                t: t as u16,
                entries: vec![
                    (pair.target[t], a.max(1.0 - a)),
                    (3 + t as u32, a.min(1.0 - a)),
                ],
            });
        }
    }
    let provenance = StoreProvenance {
        vocab_hash: String::new(),
        teacher_hash: String::new(),
        corpus_hash: String::new(),
    };
    SoftLabelStore::new(StoreHeader::new(2, 1.0, provenance), records)
}

/// Runs the whole suite; a case fails when its worst relative error reaches
/// [`TOLERANCE`].
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();

    cases.push(case(
        "matmul",
        store_of(&[("a", &[3, 4]), ("b", &[4, 2])], 1),
        |g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let c = g.matmul(a, b)?;
            weighted_sum(g, c, 2)
        },
    )?);
    cases.push(case(
        "matmul_bt",
        store_of(&[("a", &[3, 4]), ("b", &[5, 4])], 3),
        |g| {
            let (a, b) = (p(g, "a"), p(g, "b"));
            let c = g.matmul_bt(a, b)?;
            weighted_sum(g, c, 4)
        },
    )?);
    cases.push(case(
        "add/add_row/scale/relu",
        store_of(&[("x", &[4, 5]), ("y", &[4, 5]), ("b", &[5])], 5),
        |g| {
            let (x, y, b) = (p(g, "x"), p(g, "y"), p(g, "b"));
            let s = g.add(x, y)?;
            let s = g.add_row(s, b)?;
            let s = g.scale(s, 0.7);
            let r = g.relu(s);
            weighted_sum(g, r, 6)
        },
    )?);
    cases.push(case(
        "layer_norm",
        store_of(&[("x", &[3, 6]), ("gamma", &[6]), ("beta", &[6])], 7),
        |g| {
            let (x, gamma, beta) = (p(g, "x"), p(g, "gamma"), p(g, "beta"));
            let n = g.layer_norm(x, gamma, beta, 1e-6)?;
            weighted_sum(g, n, 8)
        },
    )?);
    cases.push(case("softmax", store_of(&[("x", &[2, 7])], 9), |g| {
        let x = p(g, "x");
        let y = g.softmax(x)?;
        weighted_sum(g, y, 10)
    })?);
    cases.push(case(
        "log_softmax/select_rows/mean/sum",
        store_of(&[("x", &[4, 5])], 11),
        |g| {
            let x = p(g, "x");
            let l = g.log_softmax(x)?;
            let rows = g.select_rows(l, &[3, 0, 0, 2])?;
            let m = g.mean(rows);
            let s = g.sum(l);
            let s = g.scale(s, 0.1);
            g.add(m, s)
        },
    )?);
    cases.push(case(
        "embedding",
        store_of(&[("table", &[7, 3])], 13),
        |g| {
            let t = p(g, "table");
            let e = g.embedding(t, &[4, 1, 4, 6])?;
            weighted_sum(g, e, 14)
        },
    )?);
    let mut layout = AttentionLayout::new();
    layout.push(0, 0, AttentionMask::causal(3));
    layout.push(
        3,
        3,
        AttentionMask::padding(4, &[true, false, true, true, true]),
    );
    let layout = Arc::new(layout);
    cases.push(case(
        "attention",
        store_of(&[("q", &[7, 4]), ("k", &[8, 4]), ("v", &[8, 4])], 15),
        move |g| {
            let (q, k, v) = (p(g, "q"), p(g, "k"), p(g, "v"));
            let o = g.attention(q, k, v, layout.clone(), 2)?;
            weighted_sum(g, o, 16)
        },
    )?);
    let mut targets = SoftTargets::new();
    targets.push_row([(1, 0.6), (3, 0.3)], 0.1, 0.5);
    targets.push_row([(4, 1.0)], 0.0, 0.25);
    targets.push_row([(0, 0.5), (2, 0.5)], 0.0, 0.25);
    let targets = Arc::new(targets);
    cases.push(case(
        "soft_cross_entropy",
        store_of(&[("z", &[3, 5])], 17),
        move |g| {
            let z = p(g, "z");
            g.soft_cross_entropy(z, targets.clone())
        },
    )?);

    let pairs = micro_pairs();
    let store = micro_store(&pairs)?;
    let student = Student::new(ModelConfig::micro(11), &mut ChaCha8Rng::seed_from_u64(19))?;
    let batch = StudentBatch::new(&pairs);
    let probe = student.clone();
    cases.push(case("student (compound loss)", student.params, |g| {
        let logits = batch.logits(&probe, g).map_err(as_tensor_error)?;
        let xe = xe_loss(g, logits, &batch, 0.1).map_err(as_tensor_error)?;
        let bidi = bidi_loss(g, logits, &batch, &store).map_err(as_tensor_error)?;
        compound_loss(g, xe, bidi, 0.5).map_err(as_tensor_error)
    })?);

    let teacher_config = ModelConfig {
        positions: PositionEncoding::Learned,
        ..ModelConfig::micro(11)
    };
    for (name, attention) in [
        (
            "teacher (bidirectional, C-MLM loss)",
            TeacherAttention::Bidirectional,
        ),
        (
            "teacher (left-to-right, C-MLM loss)",
            TeacherAttention::LeftToRight,
        ),
    ] {
        let teacher = Teacher::new(
            teacher_config.clone(),
            attention,
            &mut ChaCha8Rng::seed_from_u64(21),
        )?;
        let examples = vec![
            MaskedExample::from_positions(&pairs[0], vec![0, 2]),
            MaskedExample::from_positions(&pairs[1], vec![1]),
        ];
        let probe = teacher.clone();
        cases.push(case(name, teacher.params, |g| {
            cmlm_loss(&probe, g, &examples).map_err(as_tensor_error)
        })?);
    }
    Ok(cases)
}
