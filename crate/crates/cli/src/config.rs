use std::fs;
use std::path::Path;

use cad_core::data::GeneratorConfig;
use cad_core::model::ModelConfig;
use cad_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run depends on besides the data. Each section may be omitted
/// from a config file; missing keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// `--seed` drives generation, initialization and batch order alike.
    pub fn set_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }
}
