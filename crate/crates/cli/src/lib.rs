//! Library side of the `tdmjls` command: config loading, subcommand dispatch
//! and CSV/JSON output.

pub mod config;
pub mod output;
pub mod run;

pub use config::{load_config, ConfigError, ProblemConfig};
pub use run::{run, CliError, Command, Outcome, Overrides};

use std::path::Path;

/// Reads, overrides and validates a config in one step.
pub fn load_with_overrides(
    path: &Path,
    overrides: &Overrides,
) -> Result<ProblemConfig, ConfigError> {
    let mut file = config::parse_file(path)?;
    overrides.apply(&mut file);
    config::validate(file)
}
