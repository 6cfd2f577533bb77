use std::fs;
use std::path::{Path, PathBuf};

use cmlm_core::checkpoint::Checkpoint;
use cmlm_core::error::{Error, Result};
use cmlm_core::experiment::{
    decode_all, evaluate, evaluate_student, run_comparison, soft_labels, student_trainer,
    train_teacher, Dataset, Recipe,
};
use cmlm_core::gradsuite::{gradient_suite, TOLERANCE};
use cmlm_core::metrics::tokens;
use cmlm_core::metrics_log::MetricsLog;
use cmlm_core::softlabel::{entropy, SoftLabelStore};
use cmlm_core::text::{Tokenizer, WhitespaceTokenizer};
use serde_json::json;

use crate::config::{load_recipe, render};
use crate::{Cli, Command};

pub fn run(cli: &Cli, overrides: &[String]) -> Result<()> {
    let recipe = load_recipe(cli.config.as_deref(), overrides, cli.seed)?;
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::GradCheck => return grad_check(),
        Command::Evaluate {
            hyp,
            reference,
            bucket_width,
        } => {
            return evaluate_files(
                hyp,
                reference,
                bucket_width.unwrap_or(recipe.eval.bucket_width),
            )
        }
        _ => {}
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("recipe.toml"), render(&recipe).as_bytes())?;
    match &cli.command {
        Command::GenerateCorpus => generate_corpus(&recipe, out),
        Command::FinetuneTeacher { variant } => finetune(&recipe, out, *variant),
        Command::PrecomputeLogits { teacher, output } => precompute_logits(
            &recipe,
            &or_default(teacher, out, "teacher.ckpt"),
            &or_default(output, out, "softlabels.bin"),
        ),
        Command::TrainStudent {
            store,
            init,
            resume,
            until_step,
        } => train(
            &recipe,
            out,
            &or_default(store, out, "softlabels.bin"),
            init.as_deref(),
            resume.as_deref(),
            *until_step,
        ),
        Command::Translate {
            checkpoint,
            input,
            output,
        } => translate_file(&recipe, checkpoint, input, output),
        Command::Ablate => ablate(&recipe, out),
        Command::GradCheck | Command::Evaluate { .. } => unreachable!("handled above"),
    }
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn generate_corpus(recipe: &Recipe, out: &Path) -> Result<()> {
    let splits = recipe.synthetic.generate();
    for (name, text) in ["train", "dev", "test"].iter().zip(&splits) {
        text.write(&out.join(name))?;
    }
    let prefixes = ["train", "dev", "test"].map(|n| out.join(n));
    print_json(&json!({
        "train": splits[0].len(),
        "dev": splits[1].len(),
        "test": splits[2].len(),
        "prefixes": prefixes,
    }));
    Ok(())
}

fn load_dataset(recipe: &Recipe, out: &Path) -> Result<Dataset> {
    let ds = Dataset::load(&recipe.data, &recipe.synthetic)?;
    write(&out.join("vocab.txt"), ds.vocab.to_file_string().as_bytes())?;
    Ok(ds)
}

fn finetune(
    recipe: &Recipe,
    out: &Path,
    variant: Option<cmlm_core::cmlm::TeacherVariant>,
) -> Result<()> {
    let variant = variant.unwrap_or(recipe.experiment.teacher);
    let ds = load_dataset(recipe, out)?;
    let mut log = MetricsLog::to_file(&out.join("teacher.jsonl"))?;
    let (outcome, ckpt) = train_teacher(&ds, recipe, variant, &mut log)?;
    let path = out.join("teacher.ckpt");
    ckpt.save(&path)?;
    print_json(&json!({
        "variant": variant.name(),
        "dev_masked_accuracy": outcome.best_accuracy,
        "best_step": outcome.best_step,
        "steps": outcome.steps,
        "checkpoint": path,
        "checkpoint_hash": ckpt.content_hash(),
    }));
    Ok(())
}

fn precompute_logits(recipe: &Recipe, teacher: &Path, output: &Path) -> Result<()> {
    let ds = Dataset::load(&recipe.data, &recipe.synthetic)?;
    let ckpt = Checkpoint::load(teacher)?;
    let pre = soft_labels(&ds, &ckpt, recipe)?;
    pre.store.write(output)?;
    let records = pre.store.records();
    let mean_entropy = records
        .iter()
        .map(|r| entropy(r.entries.iter().map(|e| e.1 as f64)))
        .sum::<f64>()
        / records.len().max(1) as f64;
    print_json(&json!({
        "records": records.len(),
        "pairs": pre.store.header().pair_count,
        "forward_passes": pre.forward_passes,
        "K": pre.store.header().k,
        "T": pre.store.header().temperature,
        "mean_entropy": mean_entropy,
        "store": output,
    }));
    Ok(())
}

fn read_store(path: &Path, ds: &Dataset) -> Result<SoftLabelStore> {
    let store = SoftLabelStore::read(path)?;
    let h = store.header();
    if h.vocab_hash != ds.vocab_hash || h.corpus_hash != ds.corpus_hash {
        return Err(Error::Integrity(format!(
            "{} was built from a different vocabulary or corpus",
            path.display()
        )));
    }
    Ok(store)
}

fn train(
    recipe: &Recipe,
    out: &Path,
    store_path: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    until_step: Option<u64>,
) -> Result<()> {
    let ds = load_dataset(recipe, out)?;
    let log_path = out.join("student.jsonl");
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let alpha = match &resumed {
        Some(c) => c.train_config["alpha"].as_f64().unwrap_or(0.0),
        None => recipe.train.alpha,
    };
    let store = if alpha > 0.0 {
        Some(read_store(store_path, &ds)?)
    } else {
        None
    };
    let init = init.map(Checkpoint::load).transpose()?;
    let (mut trainer, mut log) = match resumed {
        Some(ckpt) => {
            ds.check_hashes("resumed checkpoint", &ckpt.hashes)?;
            let t = cmlm_core::distill::StudentTrainer::resume(
                ckpt,
                &ds.train,
                &ds.dev,
                store.as_ref(),
            )?;
            (t, MetricsLog::append_to(&log_path)?)
        }
        None => {
            let t = student_trainer(
                &ds,
                recipe,
                alpha,
                recipe.train.seed,
                store.as_ref(),
                init.as_ref(),
            )?;
            (t, MetricsLog::to_file(&log_path)?)
        }
    };
    trainer.run(&mut log, until_step)?;
    let state_path = out.join("student.state.ckpt");
    trainer.checkpoint().save(&state_path)?;
    let step = trainer.state().step;
    if step < trainer.config().total_steps {
        print_json(&json!({ "step": step, "state": state_path }));
        return Ok(());
    }
    let outcome = trainer.finish()?;
    let mut best = Checkpoint::student(&outcome.best);
    best.train_config = outcome.last.train_config.clone();
    best.hashes = outcome.last.hashes.clone();
    let best_path = out.join("student.ckpt");
    best.save(&best_path)?;
    let test = if ds.test.is_empty() {
        None
    } else {
        Some(evaluate_student(&outcome.best, &ds.test, recipe)?)
    };
    print_json(&json!({
        "step": step,
        "best_step": outcome.best_step,
        "dev_best": outcome.best_metric,
        "checkpoint": best_path,
        "state": state_path,
        "test": test,
    }));
    Ok(())
}

fn translate_file(recipe: &Recipe, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let ds = Dataset::load(&recipe.data, &recipe.synthetic)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.hashes.get("vocab") != Some(&ds.vocab_hash) {
        return Err(Error::Integrity(format!(
            "{} was trained with a different vocabulary",
            checkpoint.display()
        )));
    }
    let student = ckpt.into_student()?;
    let tokenizer = if recipe.data.char_fallback {
        WhitespaceTokenizer::with_char_fallback(&ds.vocab)
    } else {
        WhitespaceTokenizer::new(&ds.vocab)
    };
    let lines = read_lines(input)?;
    let encoded: Vec<Vec<u32>> = lines.iter().map(|l| tokenizer.encode(l)).collect();
    let nonempty: Vec<&[u32]> = encoded
        .iter()
        .filter(|s| !s.is_empty())
        .map(Vec::as_slice)
        .collect();
    let mut decoded = decode_all(&student, &nonempty, &recipe.decode.config())?.into_iter();
    let mut text = String::new();
    for src in &encoded {
        if !src.is_empty() {
            text.push_str(&tokenizer.decode(&decoded.next().expect("one per source")));
        }
        text.push('\n');
    }
    write(output, text.as_bytes())
}

fn evaluate_files(hyp: &Path, reference: &Path, bucket_width: usize) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            hyps.len(),
            reference.display(),
            refs.len()
        )));
    }
    let h: Vec<Vec<&str>> = hyps.iter().map(|l| tokens(l)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|l| tokens(l)).collect();
    let report = evaluate(&h, &r, bucket_width)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    print!("{}", report.bucket_table());
    Ok(())
}

fn ablate(recipe: &Recipe, out: &Path) -> Result<()> {
    let ds = load_dataset(recipe, out)?;
    let cmp = run_comparison(
        recipe,
        &ds,
        &recipe.experiment.variants,
        Some(&out.join("logs")),
        &mut |line| eprintln!("{line}"),
    )?;
    let table = cmp.table();
    write(
        &out.join("comparison.json"),
        serde_json::to_string_pretty(&cmp).expect("json").as_bytes(),
    )?;
    write(&out.join("comparison.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn grad_check() -> Result<()> {
    let cases = gradient_suite()?;
    let mut failed = Vec::new();
    for c in &cases {
        println!(
            "{} {:<38} checked {:>5}  max rel err {:.3e}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.checked,
            c.max_rel_err
        );
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("all {} cases below {TOLERANCE:e}", cases.len());
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
