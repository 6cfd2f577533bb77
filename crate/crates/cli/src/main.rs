//! `cmlm`: teacher finetuning, soft-label precomputation, student training,
//! decoding, evaluation and the desk-scale comparison experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmlm_core::cmlm::TeacherVariant;

#[derive(Parser, Debug)]
#[command(
    name = "cmlm",
    version,
    about = "C-MLM teachers and knowledge distillation for sequence-to-sequence students",
    after_help = "Any recipe key can be overridden as --<section>.<key>=<value>, e.g. --train.alpha=0.5"
)]
struct Cli {
    /// Recipe file (TOML sections); unset keys keep the desk-recipe defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every training stage; replaces experiment.seeds with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts, logs and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train/dev/test corpus described by [synthetic].
    GenerateCorpus,
    /// Train a C-MLM teacher on the training split.
    FinetuneTeacher {
        /// Teacher variant; defaults to experiment.teacher.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<TeacherVariant>,
    },
    /// Store the teacher's top-K distributions for every training target token.
    PrecomputeLogits {
        /// Teacher checkpoint [default: <out-dir>/teacher.ckpt].
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Soft-label store to write [default: <out-dir>/softlabels.bin].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a student; uses the soft-label store when train.alpha > 0.
    TrainStudent {
        /// Soft-label store [default: <out-dir>/softlabels.bin].
        #[arg(long)]
        store: Option<PathBuf>,
        /// Initialize from a student checkpoint (e.g. a trained baseline).
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue a run from its training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this optimizer step (the state checkpoint allows resuming).
        #[arg(long)]
        until_step: Option<u64>,
    },
    /// Beam-decode a file of source sentences, one per line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score hypotheses against references: metric JSON and a per-length table.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Reference-length bucket width [default: eval.bucket_width].
        #[arg(long)]
        bucket_width: Option<usize>,
    },
    /// Teachers from experiment.variants, then baseline and distilled students
    /// for every seed, with a comparison table.
    Ablate,
    /// Finite-difference gradient checks of every op and both micro models.
    GradCheck,
}

fn parse_variant(s: &str) -> Result<TeacherVariant, String> {
    TeacherVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = TeacherVariant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "unknown teacher variant `{s}`; expected one of {}",
            names.join(", ")
        )
    })
}

fn main() -> ExitCode {
    let (args, overrides) = config::split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match commands::run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
