//! Experiment runner: configuration, the desk-scale experiments and the
//! equivalence suite, with CSV/JSON output.

pub mod config;
pub mod error;
pub mod lfi;
pub mod output;
pub mod sparse;
pub mod suite;
pub mod ttr;

use config::{Experiment, RunConfig};
use error::CliResult;

/// Runs the experiment named in a validated config and writes its outputs.
pub fn run(config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    match config.experiment {
        Experiment::Ttr => ttr::run_ttr(config),
        Experiment::Sparse => sparse::run_sparse(config),
        Experiment::Lfi => lfi::run_lfi(config),
        Experiment::EquivalenceSuite => suite::run_suite(config),
    }
}
