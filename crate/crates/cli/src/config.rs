//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use shotcache::{ModelConfig, ProbeConfig};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub seed: u64,
    pub max_position: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            layers: c.num_layers,
            heads: c.num_heads,
            head_dim: c.head_dim,
            vocab: c.vocab_size,
            rope_base: c.rope_base,
            seed: c.weight_seed,
            max_position: c.max_position,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub tau: f64,
    pub step: usize,
    pub probes_per_round: usize,
    pub max_shots: usize,
    pub prompt: String,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            tau: p.tau,
            step: p.step,
            probes_per_round: p.probes_per_round,
            max_shots: p.max_shots,
            prompt: String::from_utf8_lossy(&p.probe_prompt).into_owned(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// Scoring layer; the last layer when absent.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub max_new_tokens: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { max_new_tokens: 16 }
    }
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub instruction: Option<String>,
}

/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub cache: Option<PathBuf>,
    pub shots: Option<PathBuf>,
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub probe: ProbeSection,
    pub retrieval: RetrievalSection,
    pub decode: DecodeSection,
    pub pool: PoolSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.paths.cache, &mut cfg.paths.shots, &mut cfg.paths.queries].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_layers: m.layers,
            num_heads: m.heads,
            head_dim: m.head_dim,
            hidden_dim: m.heads * m.head_dim,
            vocab_size: m.vocab,
            rope_base: m.rope_base,
            weight_seed: m.seed,
            max_position: m.max_position,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            tau: p.tau,
            step: p.step,
            probes_per_round: p.probes_per_round,
            max_shots: p.max_shots,
            probe_prompt: p.prompt.as_bytes().to_vec(),
            ..ProbeConfig::default()
        }
    }

    pub fn scoring_layer(&self) -> usize {
        self.retrieval.layer.unwrap_or(self.model.layers.saturating_sub(1))
    }
}
