//! Thin command-line front end; all logic lives in `freedarts::cli`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use freedarts::cli::{
    cmd_bias_report, cmd_ntk_verify, cmd_oracle, cmd_search, cmd_sweep_alpha, cmd_track,
    CliError, Evaluator, RunConfig,
};
use freedarts::scoring::ScoreVariant;
use freedarts::search::SearchMode;

#[derive(Parser)]
#[command(
    name = "freedarts",
    about = "Training-free differentiable architecture search via operation sensitivity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune a supernet to a discrete architecture, one run per seed.
    Search(CommonArgs),
    /// Sweep the alpha initialization scale and record the genotypes.
    SweepAlpha(CommonArgs),
    /// Run the kernel verification battery (width scaling, sensitivity
    /// bound, decomposition, block additivity).
    NtkVerify(CommonArgs),
    /// Compare selection bias across scoring methods.
    BiasReport(CommonArgs),
    /// Enumerate and train a miniature space, then rank this config's
    /// searches against the resulting table.
    Oracle(CommonArgs),
    /// Track evaluator quality along the pruning trajectory
    /// (requires --lookup).
    Track(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed list, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Scoring variant: vanilla | label | data.
    #[arg(long)]
    variant: Option<String>,
    /// Pruning mode: iterative | oneshot.
    #[arg(long)]
    mode: Option<String>,
    /// Alpha initialization scale(s); sweep-alpha accepts a comma list.
    #[arg(long, value_delimiter = ',')]
    alpha_scale: Option<Vec<f64>>,
    /// Worker threads for per-seed and per-candidate parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Genotype-to-quality lookup file or oracle table JSON.
    #[arg(long)]
    lookup: Option<PathBuf>,
    /// Output directory (FREEDARTS_OUT overrides).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<ScoreVariant, CliError> {
    match s {
        "vanilla" => Ok(ScoreVariant::Vanilla),
        "label" | "label_agnostic" => Ok(ScoreVariant::LabelAgnostic),
        "data" | "data_agnostic" => Ok(ScoreVariant::DataAgnostic),
        other => Err(CliError::Config(format!(
            "unknown variant {other:?}; expected vanilla | label | data"
        ))),
    }
}

fn parse_mode(s: &str) -> Result<SearchMode, CliError> {
    match s {
        "iterative" => Ok(SearchMode::Iterative),
        "oneshot" => Ok(SearchMode::Oneshot),
        other => Err(CliError::Config(format!(
            "unknown mode {other:?}; expected iterative | oneshot"
        ))),
    }
}

impl CommonArgs {
    fn build_config(&self) -> Result<(RunConfig, Vec<f64>), CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seeds) = &self.seed {
            config.seeds = seeds.clone();
        }
        if let Some(v) = &self.variant {
            config.variant = parse_variant(v)?;
        }
        if let Some(m) = &self.mode {
            config.mode = parse_mode(m)?;
        }
        let mut alphas = vec![1e-5, 1e-4, 1e-3, 1e-2];
        if let Some(a) = &self.alpha_scale {
            alphas = a.clone();
            config.alpha_scale = a[0];
        }
        if let Some(w) = self.workers {
            config.workers = w;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.display().to_string();
        }
        config.validate()?;
        Ok((config, alphas))
    }

    fn evaluator(&self) -> Result<Option<Evaluator>, CliError> {
        self.lookup.as_deref().map(Evaluator::load).transpose()
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Search(args) => {
            let (config, _) = args.build_config()?;
            cmd_search(&config)?;
        }
        Command::SweepAlpha(args) => {
            let (config, alphas) = args.build_config()?;
            let evaluator = args.evaluator()?;
            let path = cmd_sweep_alpha(&config, &alphas, evaluator.as_ref())?;
            println!("wrote {}", path.display());
        }
        Command::NtkVerify(args) => {
            let (config, _) = args.build_config()?;
            cmd_ntk_verify(&config)?;
        }
        Command::BiasReport(args) => {
            let (config, _) = args.build_config()?;
            cmd_bias_report(&config)?;
        }
        Command::Oracle(args) => {
            let (config, _) = args.build_config()?;
            cmd_oracle(&config)?;
        }
        Command::Track(args) => {
            let (config, _) = args.build_config()?;
            let evaluator = args.evaluator()?.ok_or_else(|| {
                CliError::Config("track needs --lookup FILE (lookup or oracle JSON)".into())
            })?;
            cmd_track(&config, &evaluator)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
