//! `tunegen` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, settings or argument combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Training stopped on a non-finite loss or gradient.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

#[derive(Parser)]
#[command(name = "tunegen", version, about = "Generate ABC tunes from text descriptions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run settings shared by the training commands.
#[derive(Args)]
pub struct RunFlags {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model preset.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a rule-generated corpus of description-tune pairs.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of list-format descriptions; the rest are prose.
        #[arg(long, default_value_t = 0.5)]
        format_mix: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a byte-level BPE vocabulary.
    TrainBpe {
        /// Dataset file (descriptions are used), or plain text with `--plain`.
        #[arg(long)]
        corpus: PathBuf,
        /// Treat each non-empty line of the corpus as a document.
        #[arg(long)]
        plain: bool,
        #[arg(long, default_value_t = 2)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain one stack (or the whole model) and save its checkpoint.
    Pretrain {
        #[arg(long)]
        objective: String,
        /// encoder, decoder or all.
        #[arg(long, default_value = "encoder")]
        part: String,
        /// Dataset file, or plain text with `--plain`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        plain: bool,
        /// Existing BPE vocabulary; trained from the corpus when absent.
        #[arg(long)]
        bpe: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Fine-tune on description-tune pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Initialize the encoder from a checkpoint.
        #[arg(long, conflicts_with = "init_full")]
        init_encoder: Option<PathBuf>,
        /// Start from a complete checkpoint, keeping its configuration.
        #[arg(long)]
        init_full: Option<PathBuf>,
        /// Existing BPE vocabulary. Defaults to the one next to the initial
        /// checkpoint, else a new one is trained.
        #[arg(long)]
        bpe: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Sample a tune for a description.
    Generate {
        /// Checkpoint file, or a run directory (its best checkpoint).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
        text: Option<String>,
        /// Read one description per line from standard input.
        #[arg(long)]
        stdin: bool,
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        max_len: usize,
    },
    /// Generate for every held-out description and score against references.
    Evaluate {
        /// Checkpoint file, or a run directory (its best checkpoint).
        #[arg(long)]
        ckpt: PathBuf,
        /// Pairs to evaluate. Defaults to the run directory's validation split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        max_len: usize,
        /// abc or char.
        #[arg(long, default_value = "abc")]
        unit: String,
        /// Row label in the report table.
        #[arg(long, default_value = "model")]
        label: String,
        /// Earlier report.json to compare against with Welch's t-test.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output directory for generations and the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidate tunes against references.
    Metrics {
        /// Dataset file whose tunes are the candidates.
        #[arg(long)]
        candidates: PathBuf,
        /// Dataset file whose tunes are the references.
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value = "abc")]
        unit: String,
        /// Directory for report.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's configuration, tensors and parameter counts.
    InspectCkpt { path: PathBuf },
    /// Write a freshly initialized checkpoint of a preset.
    Init {
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// encoder, decoder or all.
        #[arg(long, default_value = "all")]
        part: String,
        /// Source vocabulary size for the tiny preset.
        #[arg(long, default_value_t = 260)]
        src_vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<tunegen::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::SynthData {
            n,
            seed,
            format_mix,
            out,
        } => commands::synth_data(n, seed, format_mix, &out),
        Command::TrainBpe {
            corpus,
            plain,
            min_freq,
            out,
        } => commands::train_bpe(&corpus, plain, min_freq, &out),
        Command::Pretrain {
            objective,
            part,
            corpus,
            plain,
            bpe,
            out,
            run,
        } => commands::pretrain(&objective, &part, &corpus, plain, bpe.as_deref(), &out, &run),
        Command::Train {
            data,
            init_encoder,
            init_full,
            bpe,
            out,
            run,
        } => commands::train(
            &data,
            init_encoder.as_deref(),
            init_full.as_deref(),
            bpe.as_deref(),
            &out,
            &run,
        ),
        Command::Generate {
            ckpt,
            text,
            stdin,
            bpe,
            top_p,
            seed,
            max_len,
        } => commands::generate(&ckpt, text.as_deref(), stdin, bpe.as_deref(), top_p, seed, max_len),
        Command::Evaluate {
            ckpt,
            data,
            bpe,
            top_p,
            seed,
            max_len,
            unit,
            label,
            baseline,
            out,
        } => commands::evaluate(commands::EvaluateArgs {
            ckpt: &ckpt,
            data: data.as_deref(),
            bpe: bpe.as_deref(),
            top_p,
            seed,
            max_len,
            unit: &unit,
            label: &label,
            baseline: baseline.as_deref(),
            out: &out,
        }),
        Command::Metrics {
            candidates,
            references,
            unit,
            out,
        } => commands::metrics(&candidates, &references, &unit, out.as_deref()),
        Command::InspectCkpt { path } => commands::inspect_ckpt(&path),
        Command::Init {
            preset,
            part,
            src_vocab,
            seed,
            out,
        } => commands::init(&preset, &part, src_vocab, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
