//! The experiment configuration file (TOML, versioned).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bt::BtPlan;
use super::family::FamilySetup;
use crate::alignment::AlignConfig;
use crate::error::{Error, Result};
use crate::model::{HeadKind, TrainConfig, TransformerConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BtSettings {
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub beam: usize,
    pub eval_beam: usize,
    pub mono_limit: Option<usize>,
    pub synthetic_dev: usize,
    pub restart_from_base: bool,
}

impl Default for BtSettings {
    fn default() -> Self {
        let p = BtPlan::new("xx", &["yy"]);
        Self {
            iterations: p.iterations,
            steps_per_iteration: p.steps_per_iteration,
            beam: p.beam,
            eval_beam: p.eval_beam,
            mono_limit: p.mono_limit,
            synthetic_dev: p.synthetic_dev,
            restart_from_base: p.restart_from_base,
        }
    }
}

impl BtSettings {
    pub fn plan(&self, new_language: &str, partners: &[String], train: &TrainConfig) -> BtPlan {
        BtPlan {
            new_language: new_language.into(),
            partners: partners.to_vec(),
            iterations: self.iterations,
            steps_per_iteration: self.steps_per_iteration,
            beam: self.beam,
            eval_beam: self.eval_beam,
            mono_limit: self.mono_limit,
            synthetic_dev: self.synthetic_dev,
            restart_from_base: self.restart_from_base,
            train: train.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub family: FamilySetup,
    pub align: AlignConfig,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub backtranslate: BtSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 1,
            family: FamilySetup::desk(1, 32),
            align: AlignConfig::default(),
            model: TransformerConfig::desk(32, 2, HeadKind::Softmax),
            train: TrainConfig::default(),
            backtranslate: BtSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Apply a command-line seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.family.grammar.seed = seed;
        self.family.skipgram.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_schema_and_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("schema_version = 9"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("schema_version = 1\nbogus = 2"), Err(Error::Config(_))));
        let c = ExperimentConfig::parse("schema_version = 1\nseed = 4\n[train]\nmax_updates = 10").unwrap();
        assert_eq!((c.seed, c.train.max_updates), (4, 10));
    }
}
