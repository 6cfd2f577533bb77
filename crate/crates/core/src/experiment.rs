//! Declarative experiment recipes and the end-to-end pipeline built from them:
//! data, teacher, soft labels, students, evaluation and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cmlm::{finetune_teacher, FinetuneOutcome, TeacherTrainConfig, TeacherVariant};
use crate::decode::{translate, DecodeConfig};
use crate::distill::{StudentTrainer, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::metrics::{bleu_by_length, corpus_bleu, rouge, LengthBucket, RougeScores};
use crate::metrics_log::MetricsLog;
use crate::model::{ModelConfig, PositionEncoding, Student};
use crate::rng::{stream, Stream};
use crate::softlabel::{precompute, Precomputed, SoftLabelStore, StoreProvenance};
use crate::text::synthetic::{SyntheticTask, TaskKind};
use crate::text::{
    corpus_hash, encode_corpus, ParallelText, SentencePair, Vocab, WhitespaceTokenizer,
};

/// Architecture shared by teacher and student; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Longest packed input either model accepts.
    pub max_len: usize,
    pub positions: PositionEncoding,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            dropout: 0.1,
            max_len: 64,
            positions: PositionEncoding::Learned,
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            vocab_size,
            max_len: self.max_len,
            tie_embeddings: true,
            positions: self.positions,
        }
    }
}

/// Corpus files. When `train` is unset the `[synthetic]` corpus is generated instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Path prefixes of aligned `<prefix>.src` / `<prefix>.tgt` files.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Fixed vocabulary file; built from the training corpus when unset.
    pub vocab: Option<PathBuf>,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub char_fallback: bool,
    /// Longest accepted sentence, in tokens.
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: None,
            dev: None,
            test: None,
            vocab: None,
            min_freq: 1,
            max_vocab: 50_000,
            char_fallback: false,
            max_len: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub kind: TaskKind,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Target-token corruption rate of the training split; dev and test are clean.
    pub noise: f64,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            kind: TaskKind::Reversal,
            words: 50,
            min_len: 3,
            max_len: 10,
            noise: 0.1,
            train_pairs: 5000,
            dev_pairs: 200,
            test_pairs: 200,
            seed: 7,
        }
    }
}

impl SyntheticSection {
    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            kind: self.kind,
            words: self.words,
            min_len: self.min_len,
            max_len: self.max_len,
            noise: self.noise,
        }
    }

    /// Noisy train, clean dev and clean test text.
    pub fn generate(&self) -> [ParallelText; 3] {
        let task = self.task();
        let mut rng = stream(self.seed, Stream::Data);
        let train = task.generate(self.train_pairs, true, &mut rng);
        let dev = task.generate(self.dev_pairs, false, &mut rng);
        let test = task.generate(self.test_pairs, false, &mut rng);
        [train, dev, test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam: 4,
            length_penalty: 0.6,
            max_len: 40,
        }
    }
}

impl DecodeSection {
    pub fn config(&self) -> DecodeConfig {
        DecodeConfig::new(self.beam, self.length_penalty, self.max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Width of the reference-length buckets in the stratified report.
    pub bucket_width: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { bucket_width: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Student seeds; every configuration is trained once per seed.
    pub seeds: Vec<u64>,
    /// Teacher used by `finetune-teacher` and the distilled runs.
    pub teacher: TeacherVariant,
    /// Teachers compared by `ablate`.
    pub variants: Vec<TeacherVariant>,
    /// Distilled runs train this many times longer than the baseline, warmup
    /// included.
    pub distilled_length: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![1, 2, 3],
            teacher: TeacherVariant::Full,
            variants: TeacherVariant::ALL.to_vec(),
            distilled_length: 2,
        }
    }
}

/// Everything needed to reproduce a run, section by section. The defaults are
/// the desk-scale noisy-reversal experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub model: ModelSection,
    pub teacher: TeacherTrainConfig,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
            model: ModelSection::default(),
            teacher: TeacherTrainConfig {
                eta: 2e-3,
                warmup_steps: 200,
                total_steps: 3000,
                token_budget: 512,
                eval_interval: 500,
                log_interval: 100,
                ..TeacherTrainConfig::default()
            },
            train: TrainConfig {
                alpha: 0.5,
                temperature: 10.0,
                eta: 0.5,
                warmup_steps: 400,
                total_steps: 2000,
                token_budget: 512,
                eval_interval: 500,
                log_interval: 100,
                dev_max_len: 40,
                ..TrainConfig::default()
            },
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl Recipe {
    /// Keys every training stage from a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.teacher.seed = seed;
        self.train.seed = seed;
        self.experiment.seeds = vec![seed];
        self
    }

    /// The recipe a distilled run of the comparison trains with.
    pub fn distilled(&self) -> Recipe {
        let mut r = self.clone();
        let f = self.experiment.distilled_length;
        r.train.total_steps *= f;
        r.train.warmup_steps *= f;
        r
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.experiment.distilled_length == 0 {
            return Err(Error::Config(
                "experiment.distilled_length must be at least 1".into(),
            ));
        }
        self.model.config(16).validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if self.eval.bucket_width == 0 {
            return Err(Error::Config("eval.bucket_width must be positive".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be positive".into()));
        }
        Ok(())
    }
}

/// Tokenized splits with the vocabulary and content hashes that artifacts record.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    pub vocab_hash: String,
    pub corpus_hash: String,
}

impl Dataset {
    pub fn load(data: &DataSection, synthetic: &SyntheticSection) -> Result<Self> {
        let (train, dev, test) = match &data.train {
            Some(prefix) => {
                let read = |p: &Option<PathBuf>| -> Result<ParallelText> {
                    Ok(match p {
                        Some(p) => ParallelText::read(p)?,
                        None => ParallelText::default(),
                    })
                };
                (
                    ParallelText::read(prefix)?,
                    read(&data.dev)?,
                    read(&data.test)?,
                )
            }
            None => {
                let [a, b, c] = synthetic.generate();
                (a, b, c)
            }
        };
        let vocab = match &data.vocab {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Vocab::from_file_string(&text)?
            }
            None if data.char_fallback => {
                Vocab::build_with_chars(train.all_lines(), data.min_freq, data.max_vocab)?
            }
            None => Vocab::build(train.all_lines(), data.min_freq, data.max_vocab)?,
        };
        Self::from_text(vocab, &train, &dev, &test, data)
    }

    pub fn from_text(
        vocab: Vocab,
        train: &ParallelText,
        dev: &ParallelText,
        test: &ParallelText,
        data: &DataSection,
    ) -> Result<Self> {
        let tokenizer = if data.char_fallback {
            WhitespaceTokenizer::with_char_fallback(&vocab)
        } else {
            WhitespaceTokenizer::new(&vocab)
        };
        let encode = |t: &ParallelText| -> Result<Vec<SentencePair>> {
            if t.is_empty() {
                Ok(Vec::new())
            } else {
                Ok(encode_corpus(t, &tokenizer, data.max_len)?)
            }
        };
        let train = encode(train)?;
        let dev = encode(dev)?;
        let test = encode(test)?;
        Ok(Dataset {
            vocab_hash: vocab.hash(),
            corpus_hash: corpus_hash(&train),
            vocab,
            train,
            dev,
            test,
        })
    }

    /// The hashes every downstream artifact records.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("vocab".to_string(), self.vocab_hash.clone()),
            ("corpus".to_string(), self.corpus_hash.clone()),
        ])
    }

    /// Fails unless `hashes` names this dataset's vocabulary and training corpus.
    pub fn check_hashes(&self, artifact: &str, hashes: &BTreeMap<String, String>) -> Result<()> {
        for (key, expected) in self.hashes() {
            match hashes.get(&key) {
                Some(found) if *found == expected => {}
                found => return Err(Error::Integrity(format!(
                    "{artifact} was built from a different {key} (recorded {}, current {expected})",
                    found.map_or("nothing", String::as_str)
                ))),
            }
        }
        Ok(())
    }
}

/// Trains a teacher variant and packages it with the dataset hashes.
pub fn train_teacher(
    ds: &Dataset,
    recipe: &Recipe,
    variant: TeacherVariant,
    log: &mut MetricsLog,
) -> Result<(FinetuneOutcome, Checkpoint)> {
    let model = recipe.model.config(ds.vocab.len());
    let outcome = finetune_teacher(&ds.train, &ds.dev, variant, &model, &recipe.teacher, log)?;
    let mut ckpt = Checkpoint::teacher(&outcome.teacher);
    ckpt.train_config = serde_json::to_value(&recipe.teacher).expect("config serializes");
    ckpt.train_state = serde_json::json!({
        "variant": variant.name(),
        "best_step": outcome.best_step,
        "steps": outcome.steps,
        "dev_masked_accuracy": outcome.best_accuracy,
    });
    ckpt.hashes = ds.hashes();
    Ok((outcome, ckpt))
}

/// Top-K soft labels for the training split from a teacher checkpoint.
pub fn soft_labels(ds: &Dataset, teacher: &Checkpoint, recipe: &Recipe) -> Result<Precomputed> {
    ds.check_hashes("teacher checkpoint", &teacher.hashes)?;
    let provenance = StoreProvenance {
        vocab_hash: ds.vocab_hash.clone(),
        teacher_hash: teacher.content_hash(),
        corpus_hash: ds.corpus_hash.clone(),
    };
    let model = teacher.clone().into_teacher()?;
    precompute(
        &ds.train,
        &model,
        recipe.train.k,
        recipe.train.temperature,
        provenance,
    )
}

/// A trainer for one student run; `alpha = 0` trains without the store.
pub fn student_trainer<'d>(
    ds: &'d Dataset,
    recipe: &Recipe,
    alpha: f64,
    seed: u64,
    store: Option<&'d SoftLabelStore>,
    init: Option<&Checkpoint>,
) -> Result<StudentTrainer<'d>> {
    let config = TrainConfig {
        alpha,
        seed,
        ..recipe.train.clone()
    };
    let model = recipe.model.config(ds.vocab.len());
    let student = match init {
        Some(ckpt) => {
            ckpt.check_model(&model)?;
            ds.check_hashes("initial checkpoint", &ckpt.hashes)?;
            ckpt.clone().into_student()?
        }
        None => Student::new(model, &mut stream(seed, Stream::Init))?,
    };
    let store = if alpha > 0.0 {
        let store = store
            .ok_or_else(|| Error::Config(format!("alpha = {alpha} needs a soft-label store")))?;
        let h = store.header();
        if h.vocab_hash != ds.vocab_hash || h.corpus_hash != ds.corpus_hash {
            return Err(Error::Integrity(
                "soft-label store was built from a different vocabulary or corpus".into(),
            ));
        }
        Some(store)
    } else {
        None
    };
    let mut hashes = ds.hashes();
    if let Some(s) = store {
        hashes.insert("teacher".into(), s.header().teacher_hash.clone());
    }
    let mut trainer = StudentTrainer::new(student, config, &ds.train, &ds.dev, store)?;
    trainer.set_hashes(hashes);
    Ok(trainer)
}

pub fn train_student(
    ds: &Dataset,
    recipe: &Recipe,
    alpha: f64,
    seed: u64,
    store: Option<&SoftLabelStore>,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    let mut trainer = student_trainer(ds, recipe, alpha, seed, store, None)?;
    trainer.run(log, None)?;
    trainer.finish()
}

/// Beam-decodes every source independently, in parallel, preserving order.
pub fn decode_all(
    student: &Student,
    sources: &[&[u32]],
    config: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    sources
        .par_iter()
        .map(|s| translate(student, s, config))
        .collect()
}

/// Corpus metrics and the length-stratified BLEU table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pairs: usize,
    pub bleu: f64,
    pub rouge: RougeScores,
    pub buckets: Vec<LengthBucket>,
}

pub fn evaluate<T, H, R>(hyps: &[H], refs: &[R], bucket_width: usize) -> Result<Evaluation>
where
    T: Eq + std::hash::Hash,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    Ok(Evaluation {
        pairs: hyps.len(),
        bleu: corpus_bleu(hyps, refs, 4)?,
        rouge: rouge(hyps, refs)?,
        buckets: bleu_by_length(hyps, refs, bucket_width, 4)?,
    })
}

impl Evaluation {
    /// Plain-text table of per-bucket BLEU.
    pub fn bucket_table(&self) -> String {
        let mut out = String::from("length   pairs    BLEU\n");
        for b in &self.buckets {
            let range = format!("{}-{}", b.min_len, b.max_len);
            let _ = writeln!(out, "{range:<8} {:>5} {:>7.2}", b.pairs, b.bleu);
        }
        out
    }
}

/// Test-set evaluation of a student with the recipe's decoding settings.
pub fn evaluate_student(
    student: &Student,
    pairs: &[SentencePair],
    recipe: &Recipe,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Metric("no evaluation pairs".into()));
    }
    let sources: Vec<&[u32]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let hyps = decode_all(student, &sources, &recipe.decode.config())?;
    let refs: Vec<&[u32]> = pairs.iter().map(|p| p.target.as_slice()).collect();
    evaluate(&hyps, &refs, recipe.eval.bucket_width)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub variant: TeacherVariant,
    pub dev_masked_accuracy: f64,
    pub best_step: u64,
    pub steps: u64,
}

/// One student training run and its test score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub teacher: Option<TeacherVariant>,
    pub alpha: f64,
    pub seed: u64,
    pub dev_best: Option<f64>,
    pub best_step: u64,
    pub test: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub teachers: Vec<TeacherSummary>,
    pub runs: Vec<RunResult>,
}

pub const BASELINE: &str = "baseline";

pub fn distilled_label(variant: TeacherVariant) -> String {
    format!("distilled ({})", variant.name())
}

impl Comparison {
    /// Labels in the order they were first run.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }

    pub fn scores(&self, label: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.test.bleu)
            .collect()
    }

    pub fn mean(&self, label: &str) -> Option<f64> {
        let s = self.scores(label);
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    /// Test BLEU per seed and its mean for every configuration.
    pub fn table(&self) -> String {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = format!("{:<28}", "student");
        for s in &seeds {
            let _ = write!(out, " {:>8}", format!("seed {s}"));
        }
        out.push_str("     mean\n");
        for label in self.labels() {
            let _ = write!(out, "{label:<28}");
            for s in &seeds {
                match self.runs.iter().find(|r| r.label == label && r.seed == *s) {
                    Some(r) => {
                        let _ = write!(out, " {:>8.2}", r.test.bleu);
                    }
                    None => out.push_str("        -"),
                }
            }
            let _ = writeln!(out, " {:>8.2}", self.mean(label).unwrap_or(f64::NAN));
        }
        if !self.teachers.is_empty() {
            out.push_str("\nteacher         dev masked acc   steps\n");
            for t in &self.teachers {
                let _ = writeln!(
                    out,
                    "{:<15} {:>14.4} {:>7}",
                    t.variant.name(),
                    t.dev_masked_accuracy,
                    t.steps
                );
            }
        }
        out
    }
}

fn open_log(dir: Option<&Path>, name: &str) -> Result<MetricsLog> {
    match dir {
        Some(d) => MetricsLog::to_file(&d.join(name)),
        None => Ok(MetricsLog::in_memory()),
    }
}

/// Trains the baseline and one distilled student per teacher variant for every
/// seed, scoring each on the test split. Logs go to `log_dir` when given;
/// `progress` receives one line per finished stage.
pub fn run_comparison(
    recipe: &Recipe,
    ds: &Dataset,
    variants: &[TeacherVariant],
    log_dir: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<Comparison> {
    recipe.validate()?;
    if let Some(d) = log_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut cmp = Comparison::default();
    let mut stores = Vec::new();
    for &variant in variants {
        let mut log = open_log(log_dir, &format!("teacher-{}.jsonl", variant.name()))?;
        let (outcome, ckpt) = train_teacher(ds, recipe, variant, &mut log)?;
        progress(&format!(
            "teacher {}: dev masked accuracy {:.4} after {} steps",
            variant.name(),
            outcome.best_accuracy,
            outcome.steps
        ));
        cmp.teachers.push(TeacherSummary {
            variant,
            dev_masked_accuracy: outcome.best_accuracy,
            best_step: outcome.best_step,
            steps: outcome.steps,
        });
        stores.push((variant, soft_labels(ds, &ckpt, recipe)?.store));
    }
    let alpha = recipe.train.alpha;
    let distilled = recipe.distilled();
    for &seed in &recipe.experiment.seeds {
        let mut runs: Vec<(String, Option<TeacherVariant>, f64, Option<&SoftLabelStore>)> =
            vec![(BASELINE.to_string(), None, 0.0, None)];
        for (variant, store) in &stores {
            runs.push((
                distilled_label(*variant),
                Some(*variant),
                alpha,
                Some(store),
            ));
        }
        for (label, teacher, a, store) in runs {
            let file = format!(
                "student-{}-seed{seed}.jsonl",
                label.replace([' ', '(', ')'], "")
            );
            let mut log = open_log(log_dir, &file)?;
            let r = if teacher.is_some() {
                &distilled
            } else {
                recipe
            };
            let out = train_student(ds, r, a, seed, store, &mut log)?;
            let test = evaluate_student(&out.best, &ds.test, recipe)?;
            progress(&format!("{label} seed {seed}: test BLEU {:.2}", test.bleu));
            cmp.runs.push(RunResult {
                label,
                teacher,
                alpha: a,
                seed,
                dev_best: out.best_metric,
                best_step: out.best_step,
                test,
            });
        }
    }
    Ok(cmp)
}
