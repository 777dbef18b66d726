//! The structured configuration file shared by the command-line tools.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::benchmark::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::viz::TsneConfig;

/// Every section is optional; missing fields take their defaults.
///
/// ```toml
/// split_seed = 0
/// [model.encoder]
/// attention_heads = 1
/// [model.dim]
/// alpha = 1.0
/// [model.train]
/// max_epochs = 100
/// [benchmark]
/// n_labels = [50, 100]
/// [benchmark.fine_tune]
/// max_epochs = 50
/// [tsne]
/// perplexity = 30.0
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the train/test split shared by every command.
    pub split_seed: u64,
    pub model: PretrainConfig,
    /// Also holds the probe and fine-tuning settings used by `probe` and
    /// `transfer`.
    pub benchmark: BenchmarkConfig,
    pub tsne: TsneConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.benchmark.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_round_trips() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(
            RunConfig::parse("[model.train]\nmax_epochs = 3")
                .unwrap()
                .model
                .train
                .max_epochs
                == 3
        );
    }
}
