use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdwm_cli::commands::{self, RolloutArgs, Source};
use crowdwm_cli::{plots, CliError, Loaded, Overrides};
use crowdwm_core::eval::SplitMode;
use crowdwm_core::model::Variant;

/// Egocentric crowd world model: data generation, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "crowdwm", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, global = true, value_parser = parse_split)]
    split: Option<SplitMode>,
    /// Scene held out by the cross-scene split.
    #[arg(long = "hold-out", global = true)]
    hold_out: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<SplitMode, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct PredictorArgs {
    /// Checkpoint to load; defaults to the configured run's final checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the parameter-free unprojection oracle.
    #[arg(long)]
    oracle: bool,
}

impl PredictorArgs {
    fn source(&self) -> Source {
        match (&self.checkpoint, self.oracle) {
            (_, true) => Source::Oracle,
            (Some(p), false) => Source::Checkpoint(p.clone()),
            (None, false) => Source::Default,
        }
    }
}

#[derive(Debug, Args)]
struct EpisodeArgs {
    /// Episode id (`scene/split/00000`) or path relative to the dataset.
    #[arg(long)]
    episode: String,
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Rollout length T.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Sample the latent from the prior instead of using its mean.
    #[arg(long)]
    sample: bool,
}

impl EpisodeArgs {
    fn rollout_args(&self) -> RolloutArgs {
        RolloutArgs {
            episode: self.episode.clone(),
            start: self.start,
            steps: self.steps,
            sample: self.sample,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate egocentric episodes from the configured scenes.
    GenData,
    /// Train the world model on the training split.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate ADE/FDE on the test split and write a report.
    Eval {
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Roll out one episode and print the result as JSON.
    Rollout {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
    },
    /// Write per-frame CSV and SVG files for one rollout.
    ExportPlots {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Output directory; defaults to the configured plots path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.common.seed,
        variant: cli.common.variant,
        split: cli.common.split,
        hold_out: cli.common.hold_out.clone(),
        epochs: cli.common.epochs,
    };
    let loaded = Loaded::load(cli.common.config.as_deref(), &overrides)?;
    for line in &loaded.overrides {
        eprintln!("override {line}");
    }
    match cli.command {
        Command::GenData => {
            let manifest = commands::gen_data(&loaded)?;
            print!("{}", commands::stats_table(&manifest));
            eprintln!("dataset written to {}", loaded.dataset_dir().display());
        }
        Command::Train { resume } => {
            let path =
                commands::train_model(&loaded, resume.as_deref(), |line| eprintln!("{line}"))?;
            println!("{}", path.display());
        }
        Command::Eval { predictor } => {
            let (path, report) = commands::eval(&loaded, &predictor.source())?;
            print!("{}", commands::report_table(&report));
            eprintln!("report written to {}", path.display());
        }
        Command::Rollout { predictor, episode } => {
            let (_, result, label) =
                commands::run_rollout(&loaded, &predictor.source(), &episode.rollout_args())?;
            let doc = commands::rollout_json(&loaded, &result, &label);
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).map_err(|e| CliError::Failed(e.to_string()))?
            );
        }
        Command::ExportPlots {
            predictor,
            episode,
            out,
        } => {
            let (ep, result, _) =
                commands::run_rollout(&loaded, &predictor.source(), &episode.rollout_args())?;
            let dir = out.unwrap_or_else(|| loaded.plots_dir().join(ep.id.replace('/', "_")));
            let written = plots::export(&dir, &ep, &result, &loaded.config.echo())?;
            eprintln!("{} files written to {}", written.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
