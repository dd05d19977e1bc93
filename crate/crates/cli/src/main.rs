use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use greentea_cli::commands::{self, CliError};
use greentea_cli::config::{Overrides, RunConfig};
use greentea_core::datasets::Split;
use greentea_core::evolve::FeedbackMode;
use greentea_core::{MutationMode, TaskKind};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "greentea", version, about = "Evolve task prompts with error-topic feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimizer and write checkpoints and history.csv.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// Continue the run in this directory instead of starting a new one.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// Score the prompts of a file, one per line.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        prompts: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Print per-iteration scores and prompt lineages of a run.
    Inspect {
        dir: PathBuf,
        #[arg(long)]
        prompt_id: Option<String>,
    },
    /// Continue an interrupted run from its newest checkpoint.
    Resume { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task_kind: Option<TaskKindArg>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    population_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long, value_enum)]
    feedback_mode: Option<FeedbackArg>,
    #[arg(long, value_enum)]
    mutation_mode: Option<MutationArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKindArg {
    Numeric,
    MultipleChoice,
    BinaryLabel,
    FreeText,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedbackArg {
    Topic,
    RandomSample,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    Guided,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) if !path.is_file() => {
                return Err(CliError::Usage(format!("config file not found: {}", path.display())))
            }
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            data: self.data.clone(),
            task_kind: self.task_kind.map(|k| match k {
                TaskKindArg::Numeric => TaskKind::Numeric,
                TaskKindArg::MultipleChoice => TaskKind::MultipleChoice,
                TaskKindArg::BinaryLabel => TaskKind::BinaryLabel,
                TaskKindArg::FreeText => TaskKind::FreeText,
            }),
            holdout: self.holdout,
            population_size: self.population_size,
            max_iterations: self.max_iterations,
            feedback_mode: self.feedback_mode.map(|m| match m {
                FeedbackArg::Topic => FeedbackMode::Topic,
                FeedbackArg::RandomSample => FeedbackMode::RandomSample,
                FeedbackArg::None => FeedbackMode::None,
            }),
            mutation_mode: self.mutation_mode.map(|m| match m {
                MutationArg::Guided => MutationMode::Guided,
                MutationArg::Random => MutationMode::RandomMutation,
            }),
            seed: self.seed,
            checkpoint_dir: self.checkpoint_dir.clone(),
            parallelism: self.parallelism,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Optimize { resume: Some(dir), .. } | Command::Resume { dir } => commands::resume(&dir),
        Command::Optimize { run, resume: None } => commands::optimize(run.load()?),
        Command::Evaluate { run, prompts, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            commands::evaluate(run.load()?, &prompts, split)
        }
        Command::Inspect { dir, prompt_id } => commands::inspect(&dir, prompt_id.as_deref()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
