use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[synthetic]
train_pairs = 160
dev_pairs = 16
test_pairs = 16
max_len = 6

[model]
d_model = 16
d_ff = 32
heads = 2

[teacher]
total_steps = 30
warmup_steps = 5
eval_interval = 15
log_interval = 5

[train]
total_steps = 30
warmup_steps = 5
eval_interval = 10
log_interval = 5
dev_max_len = 8

[decode]
max_len = 8

[experiment]
seeds = [1, 2]
distilled_length = 1
"#;

fn cmlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn grad_check_passes_and_reports_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(cmlm(dir.path(), &["grad-check"]));
    assert!(out.contains("all 12 cases below"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn unknown_key_is_a_config_error_listing_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmlm(dir.path(), &["--train.alpah=0.5", "grad-check"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpah") && err.contains("`alpha`") && err.contains("`lsr_epsilon`"));

    fs::write(dir.path().join("bad.toml"), "[decoder]\nbeam = 2\n").unwrap();
    let out = cmlm(dir.path(), &["--config", "bad.toml", "grad-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`decode`"));
}

#[test]
fn staged_pipeline_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let base = ["--config", "tiny.toml", "--seed", "4"];
    let stage = |out_dir: &str, args: &[&str]| {
        let mut all: Vec<&str> = base.to_vec();
        all.extend(["--out-dir", out_dir]);
        all.extend(args);
        ok(cmlm(d, &all))
    };

    for run in ["a", "b"] {
        stage(run, &["finetune-teacher"]);
        stage(run, &["precompute-logits"]);
        stage(run, &["train-student"]);
    }
    for file in [
        "teacher.jsonl",
        "teacher.ckpt",
        "softlabels.bin",
        "student.jsonl",
        "student.ckpt",
    ] {
        assert_eq!(read(&d.join("a"), file), read(&d.join("b"), file), "{file}");
    }
    let teacher_log = String::from_utf8(read(&d.join("a"), "teacher.jsonl")).unwrap();
    assert!(teacher_log.contains("masked_accuracy"));
    let student_log = String::from_utf8(read(&d.join("a"), "student.jsonl")).unwrap();
    assert!(student_log.lines().all(|l| l.contains("\"bidi\"")));

    stage("c", &["finetune-teacher"]);
    stage("c", &["precompute-logits"]);
    let paused = stage("c", &["train-student", "--until-step", "13"]);
    assert!(paused.contains("\"step\": 13"), "{paused}");
    stage("c", &["train-student", "--resume", "c/student.state.ckpt"]);
    assert_eq!(
        read(&d.join("a"), "student.jsonl"),
        read(&d.join("c"), "student.jsonl")
    );
    assert_eq!(
        read(&d.join("a"), "student.state.ckpt"),
        read(&d.join("c"), "student.state.ckpt")
    );

    let baseline = stage("base", &["--train.alpha=0", "train-student"]);
    assert!(baseline.contains("\"test\""));
    let log = String::from_utf8(read(&d.join("base"), "student.jsonl")).unwrap();
    assert!(!log.contains("bidi"));
}

#[test]
fn artifacts_from_other_data_are_refused() {
    let dir = tiny_dir();
    let d = dir.path();
    let base = ["--config", "tiny.toml", "--out-dir", "o"];
    ok(cmlm(d, &[&base[..], &["finetune-teacher"]].concat()));
    let out = cmlm(
        d,
        &[&base[..], &["--synthetic.seed=99", "precompute-logits"]].concat(),
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));

    ok(cmlm(d, &[&base[..], &["precompute-logits"]].concat()));
    let out = cmlm(
        d,
        &[&base[..], &["--synthetic.seed=99", "train-student"]].concat(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = cmlm(d, &[&base[..], &["--train.k=4", "train-student"]].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = cmlm(
        d,
        &[&base[..], &["--model.layers=3", "precompute-logits"]].concat(),
    );
    assert!(out.status.success(), "the teacher's own config is used");

    let out = cmlm(
        d,
        &[&base[..], &["train-student", "--store", "missing.bin"]].concat(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn translate_then_evaluate_with_length_buckets() {
    let dir = tiny_dir();
    let d = dir.path();
    let base = ["--config", "tiny.toml", "--out-dir", "o"];
    ok(cmlm(d, &[&base[..], &["generate-corpus"]].concat()));
    ok(cmlm(
        d,
        &[&base[..], &["--train.alpha=0", "train-student"]].concat(),
    ));
    ok(cmlm(
        d,
        &[
            &base[..],
            &[
                "translate",
                "--checkpoint",
                "o/student.ckpt",
                "--input",
                "o/test.src",
                "--output",
                "hyp.txt",
            ],
        ]
        .concat(),
    ));
    let hyps = fs::read_to_string(d.join("hyp.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 16);

    let out = ok(cmlm(
        d,
        &[
            "evaluate",
            "--hyp",
            "o/test.tgt",
            "--ref",
            "o/test.tgt",
            "--bucket-width",
            "2",
        ],
    ));
    let (json, table) = out.split_at(out.rfind("}\n").unwrap() + 2);
    let report: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(report["bleu"], 100.0);
    assert_eq!(report["rouge"]["rouge_l"], 100.0);
    let buckets = report["buckets"].as_array().unwrap();
    let covered: u64 = buckets.iter().map(|b| b["pairs"].as_u64().unwrap()).sum();
    assert_eq!(covered, 16);
    assert!(table.starts_with("length"));
    assert_eq!(table.lines().count(), buckets.len() + 1);

    let out = ok(cmlm(
        d,
        &["evaluate", "--hyp", "hyp.txt", "--ref", "o/test.tgt"],
    ));
    assert!(out.contains("\"bleu\""));

    fs::write(d.join("short.txt"), "w1\n").unwrap();
    let out = cmlm(
        d,
        &["evaluate", "--hyp", "short.txt", "--ref", "o/test.tgt"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_emits_a_row_per_teacher() {
    let dir = tiny_dir();
    let d = dir.path();
    let table = ok(cmlm(
        d,
        &["--config", "tiny.toml", "--out-dir", "o", "ablate"],
    ));
    for row in [
        "baseline",
        "distilled (full)",
        "distilled (small)",
        "distilled (left_to_right)",
    ] {
        assert!(table.contains(row), "{table}");
    }
    assert!(table.contains("seed 1") && table.contains("seed 2"));
    let cmp: serde_json::Value =
        serde_json::from_slice(&read(&d.join("o"), "comparison.json")).unwrap();
    assert_eq!(cmp["runs"].as_array().unwrap().len(), 8);
    assert_eq!(cmp["teachers"].as_array().unwrap().len(), 3);
    assert!(d
        .join("o/logs/student-distilledleft_to_right-seed2.jsonl")
        .exists());
    assert!(d.join("o/logs/teacher-small.jsonl").exists());
}
