//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::Path;

use hopqg::encoding::EncodingConfig;
use hopqg::error::QgError;
use hopqg::graph::GraphConfig;
use hopqg::inference::DecodeConfig;
use hopqg::metrics::{DEFAULT_GLEU_MARGIN, DEFAULT_ROUGE_BETA};
use hopqg::model::ModelConfig;
use hopqg::synthetic::SyntheticConfig;
use hopqg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    /// Largest vocabulary built from training data, specials included.
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { max_size: 32_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_dev: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_dev: hopqg::corpus::DEFAULT_DEV_SIZE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rouge_beta: f64,
    pub gleu_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rouge_beta: DEFAULT_ROUGE_BETA,
            gleu_margin: DEFAULT_GLEU_MARGIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub alpha: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and `synth.seed` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub vocab: VocabConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub encoding: EncodingConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
    pub synth: SyntheticConfig,
}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    QgError::Config(msg.into()).into()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// Defaults, overlaid by `path` when given, then by a `--seed` flag.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The given sections, as TOML.
    pub fn sections_toml(&self, sections: &[&str]) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut table = toml::Table::new();
        if let toml::Value::Table(all) = value {
            for (k, v) in all {
                if sections.contains(&k.as_str()) {
                    table.insert(k, v);
                }
            }
        }
        toml::to_string(&table).expect("config serializes")
    }

    /// Short digest of the full effective config.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }
}
