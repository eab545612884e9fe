use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kme_decon_cli::config::{Experiment, RunConfig};
use kme_decon_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "kme-decon", version, about = "Deconditional mean embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Task-transformed regression with hyperparameter learning and baselines.
    Ttr(Common),
    /// Inducing-point learning on the toy process.
    Sparse(Common),
    /// Likelihood-free inference on the exponential-gamma benchmark.
    Lfi(Common),
    /// Runs every cross-form equivalence check.
    EquivalenceSuite {
        #[command(flatten)]
        common: Common,
        /// Offset added to the fitted coefficients, to confirm the checks can fail.
        #[arg(long)]
        perturb: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the config, print it resolved, and exit.
    #[arg(long)]
    dry_run: bool,
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("KME_DECON_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("KME_DECON_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn execute(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let (expected, common, perturb) = match cli.command {
        Command::Ttr(c) => (Experiment::Ttr, c, None),
        Command::Sparse(c) => (Experiment::Sparse, c, None),
        Command::Lfi(c) => (Experiment::Lfi, c, None),
        Command::EquivalenceSuite { common, perturb } => (Experiment::EquivalenceSuite, common, perturb),
    };
    let mut config = RunConfig::load(&common.config)?;
    if config.experiment != expected {
        return Err(CliError::Config(format!(
            "config is for `{}`, not `{}`",
            config.experiment.name(),
            expected.name()
        )));
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = common.out {
        config.out_dir = out;
    }
    if let (Some(p), Some(suite)) = (perturb, config.suite.as_mut()) {
        suite.perturb = p;
    }
    config.validate()?;
    if common.dry_run {
        println!("{}", config.to_json());
        return Ok(());
    }
    kme_decon_cli::run(&config)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
