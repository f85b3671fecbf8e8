//! Configurations shipped with the binary.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Bundled {
    pub name: &'static str,
    #[serde(skip)]
    pub text: &'static str,
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(Bundled { name: $name, text: include_str!(concat!("../configs/", $name, ".json")) }),*]
    };
}

pub const BUNDLED: &[Bundled] = bundled![
    "ou_spectrum",
    "ou_convergence",
    "quadratic_spectrum",
    "quadratic_sindy",
    "doublewell_identify",
    "duffing_conserved",
    "lemon_coarsegrain",
    "ou_mpc",
    "ou_switching",
    "burgers_mpc",
];

pub fn find(name: &str) -> Option<&'static Bundled> {
    BUNDLED.iter().find(|b| b.name == name)
}

impl Bundled {
    pub fn config(&self) -> CliResult<RunConfig> {
        RunConfig::from_json(self.text)
    }

    pub fn description(&self) -> CliResult<String> {
        Ok(self.config()?.description)
    }
}

/// Rows for `list`: name and one-line description.
pub fn listing() -> CliResult<Vec<(String, String)>> {
    BUNDLED
        .iter()
        .map(|b| b.description().map(|d| (b.name.to_string(), d)))
        .collect::<CliResult<Vec<_>>>()
        .map_err(|e| CliError::Usage(format!("bundled config is invalid: {e}")))
}
