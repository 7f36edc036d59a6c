//! `irm`: dataset construction, training, inference and evaluation driver.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use irm_core::reasoner::BackendKind;

use commands::{Ctx, DatasetInput, InferArgs, RobustnessInput};
use config::{Overrides, RunConfig};
use exit::CliError;

#[derive(Debug, Parser)]
#[command(name = "irm", version, about = "Masked-evidence video QA pipeline")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact the command writes.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Number of clue/visual refinement iterations after the first pass.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Remote,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a masked dataset from grounded QA source records, or a synthetic one.
    BuildDataset {
        #[arg(long, conflicts_with_all = ["synthetic", "separable"])]
        source: Option<PathBuf>,
        /// Generate N synthetic multiple-choice items.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Generate N items for the clue-relevance toy task.
        #[arg(long, conflicts_with = "synthetic")]
        separable: Option<usize>,
        #[arg(long, default_value_t = 4)]
        clues_per_item: usize,
        /// Evidence extension divisor.
        #[arg(long)]
        sigma: Option<f64>,
        /// Label clue relations with the configured backend.
        #[arg(long)]
        annotate: bool,
    },
    /// Dataset statistics and histograms.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Ask the backend for action-intent clue candidates per item.
    GenerateClues {
        #[arg(long)]
        dataset: PathBuf,
    },
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Items scored for relation accuracy after training (defaults to the training set).
        #[arg(long)]
        held_out: Option<PathBuf>,
        /// Train once per configured seed and report the mean.
        #[arg(long)]
        all_seeds: bool,
    },
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        /// Trained weights; a freshly initialized model is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Precomputed clue file from `generate-clues`.
        #[arg(long)]
        clues: Option<PathBuf>,
        /// Inject this fraction of unrelated clues before inference.
        #[arg(long)]
        noise_ratio: Option<f64>,
        #[arg(long, default_value = "predictions")]
        output: String,
    },
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        psav: Option<PathBuf>,
    },
    /// Accuracy drop between clean and noise-augmented clue sets.
    Robustness {
        #[arg(long, requires = "noisy", conflicts_with = "dataset")]
        vanilla: Option<PathBuf>,
        #[arg(long, requires = "vanilla")]
        noisy: Option<PathBuf>,
        /// Run both inference passes on this dataset instead of reading predictions.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildDataset { .. } => "build-dataset",
            Command::Stats { .. } => "stats",
            Command::GenerateClues { .. } => "generate-clues",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Robustness { .. } => "robustness",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        backend: cli.backend.map(|b| match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Remote => BackendKind::Remote,
        }),
        iterations: cli.iterations,
    };
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::BuildDataset { sigma, annotate, .. } => {
            if let Some(s) = sigma {
                config.dataset.sigma = *s;
            }
            config.dataset.annotate |= annotate;
        }
        Command::Gradcheck { seeds, tolerance } => {
            if let Some(n) = seeds {
                config.gradcheck.seeds = *n;
            }
            if let Some(t) = tolerance {
                config.gradcheck.tolerance = *t;
            }
        }
        _ => {}
    }
    config.validate()?;
    let ctx = Ctx { command: cli.command.name(), config: &config };

    match &cli.command {
        Command::BuildDataset { source, synthetic, separable, clues_per_item, .. } => {
            let input = match (source, synthetic, separable) {
                (Some(path), _, _) => DatasetInput::Source(path.clone()),
                (_, Some(n), _) => DatasetInput::Synthetic(*n),
                (_, _, Some(n)) => DatasetInput::Separable { items: *n, clues_per_item: *clues_per_item },
                _ => return Err(CliError::Validation("pass --source, --synthetic or --separable".into())),
            };
            commands::build_dataset_cmd(&ctx, &input)
        }
        Command::Stats { dataset } => commands::stats_cmd(&ctx, dataset),
        Command::GenerateClues { dataset } => commands::generate_clues_cmd(&ctx, dataset),
        Command::Train { dataset, held_out, all_seeds } => {
            commands::train_cmd(&ctx, dataset, held_out.as_deref(), *all_seeds)
        }
        Command::Infer { dataset, checkpoint, clues, noise_ratio, output } => commands::infer_cmd(
            &ctx,
            &InferArgs {
                dataset,
                checkpoint: checkpoint.as_deref(),
                clues: clues.as_deref(),
                noise_ratio: *noise_ratio,
                output,
            },
        ),
        Command::Evaluate { predictions, psav } => commands::evaluate_cmd(&ctx, predictions.as_deref(), psav.as_deref()),
        Command::Robustness { vanilla, noisy, dataset, checkpoint } => {
            let input = match (vanilla, noisy, dataset) {
                (Some(v), Some(n), _) => RobustnessInput::Predictions { vanilla: v, noisy: n },
                (_, _, Some(d)) => RobustnessInput::Run { dataset: d, checkpoint: checkpoint.as_deref() },
                _ => return Err(CliError::Validation("pass --vanilla and --noisy, or --dataset".into())),
            };
            commands::robustness_cmd(&ctx, &input)
        }
        Command::Gradcheck { .. } => commands::gradcheck_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::EXIT_VALIDATION } else { exit::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
