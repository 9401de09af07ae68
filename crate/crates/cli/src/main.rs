//! `wst`: train, run and evaluate the style transfer pipeline.
//!
//! Every subcommand except `synth`, `evaluate` and `gradcheck` works inside a
//! run directory (`--run`), reading the artifacts earlier subcommands left
//! there and recording what it writes in `manifest.json`. Failures print a
//! single `error: <kind>: <detail>` line and exit with status 1.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wst_core::error::CoreError;
use wst_core::training::Variant;

use commands::Common;
use run::Failure;

#[derive(Parser)]
#[command(name = "wst", version, about = "Word-level style relevance text style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding checkpoints, logs and the manifest.
    #[arg(long, default_value = "run")]
    run: PathBuf,
    /// TOML config with optional sections [synthetic], [classifier], [lm],
    /// [model], [lrp], [stage1], [stage2], [eval]. Defaults to the run's
    /// config.toml snapshot, then to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed applied to every component.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn common(&self) -> Common<'_> {
        Common {
            run: &self.run,
            config: self.config.as_deref(),
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct DataArg {
    /// Directory with `train.style{0,1}.txt`, `test.style{0,1}.txt` and
    /// optional `test.style{s}.ref{k}.txt` references.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeMode {
    Greedy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic marker corpus with substitution references.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sentences held out as the test split.
        #[arg(long, default_value_t = 500)]
        test_size: usize,
    },
    /// Build the vocabulary and train the style classifier.
    TrainClassifier {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Train forward and backward language models for both styles.
    TrainLm {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArg,
    },
    /// Denoising reconstruction with relevance supervision.
    TrainStage1 {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArg,
    },
    /// Style transfer training of the style component.
    TrainStage2 {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArg,
        /// Ablation variant to train instead of the full model.
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Rewrite sentences toward a target style.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Input file, one sentence per line; standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        target_style: u8,
        /// Print each output token with its predicted relevance.
        #[arg(long)]
        dump_relevance: bool,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: DecodeMode,
        /// Decode with the Stage-1 checkpoint instead of Stage 2.
        #[arg(long)]
        stage1: bool,
    },
    /// Score transferred sentences: accuracy, BLEU, G2, H2.
    Evaluate {
        #[arg(long)]
        outputs: PathBuf,
        /// Comma-separated reference files, line-aligned with the outputs.
        #[arg(long, value_delimiter = ',', required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        classifier: PathBuf,
        /// Vocabulary file; defaults to vocab.txt next to the classifier.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        target_style: u8,
        /// Also write the report as JSON to this file.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-token relevance of the classifier decision.
    LrpInspect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Style to explain; the predicted style when absent.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        target_style: Option<u8>,
    },
    /// Finite-difference check of every training loss on a toy problem.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Use two-point central differences instead of the five-point stencil.
        #[arg(long)]
        central: bool,
        /// Check a single loss (L_sr, L_xl, L_st, L_yl, L_cp, L_lm, L2).
        #[arg(long)]
        loss: Option<String>,
        /// Coordinates checked per parameter; all when absent.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and evaluate ablation variants; rows are appended to ablation.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArg,
        /// Variants, comma-separated: full, -NSC, NSC-lambda, -Lxl,
        /// Lcp-prime, -Lyl, -Llm, Finetuning-.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        variant: Vec<Variant>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            config,
            seed,
            test_size,
        } => commands::synth(&out, config.as_deref(), seed, test_size),
        Command::TrainClassifier { run, data, min_freq } => {
            commands::train_classifier_cmd(&run.common(), &data.data, min_freq)
        }
        Command::TrainLm { run, data } => commands::train_lm_cmd(&run.common(), &data.data),
        Command::TrainStage1 { run, data } => commands::train_stage1_cmd(&run.common(), &data.data),
        Command::TrainStage2 { run, data, variant } => commands::train_stage2_cmd(&run.common(), &data.data, variant),
        Command::Transfer {
            run,
            input,
            target_style,
            dump_relevance,
            mode: DecodeMode::Greedy,
            stage1,
        } => commands::transfer(&run.common(), input.as_deref(), target_style, dump_relevance, stage1),
        Command::Evaluate {
            outputs,
            refs,
            classifier,
            vocab,
            target_style,
            json,
            config,
        } => commands::evaluate(
            &outputs,
            &refs,
            &classifier,
            vocab.as_deref(),
            target_style,
            json.as_deref(),
            config.as_deref(),
        ),
        Command::LrpInspect {
            run,
            input,
            target_style,
        } => commands::lrp_inspect(&run.common(), input.as_deref(), target_style),
        Command::Gradcheck {
            seed,
            step,
            central,
            loss,
            limit,
        } => {
            if commands::gradcheck(seed, step, central, loss.as_deref(), limit)? {
                Ok(())
            } else {
                Err(Failure::new(
                    "gradcheck-failed",
                    format!("relative error at or above {:e}", commands::GRADCHECK_TOL),
                )
                .into())
            }
        }
        Command::Ablate { run, data, variant } => commands::ablate(&run.common(), &data.data, &variant),
    }
}

fn kind(e: &anyhow::Error) -> &'static str {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return f.kind;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::Tensor(_)) => "tensor",
        Some(CoreError::Io(_)) => "io",
        Some(CoreError::EmptyCorpus(_)) => "empty-corpus",
        Some(CoreError::Config(_)) => "config",
        Some(CoreError::UnknownStyle(_)) => "unknown-style",
        Some(CoreError::UnknownVariant(_)) => "unknown-variant",
        Some(CoreError::MissingLabel(_)) => "missing-label",
        Some(CoreError::CountMismatch { .. }) => "count-mismatch",
        Some(CoreError::NonFinite(_)) => "non-finite",
        Some(CoreError::Mismatch(_)) => "checkpoint-mismatch",
        Some(CoreError::Invalid(_)) => "invalid",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None if e.downcast_ref::<wst_autograd::TensorError>().is_some() => "tensor",
        None => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = match e.downcast_ref::<Failure>() {
                Some(f) => f.detail.clone(),
                None => format!("{e:#}"),
            };
            eprintln!("error: {}: {}", kind(&e), detail.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
