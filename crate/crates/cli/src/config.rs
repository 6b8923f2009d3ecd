//! Run configuration read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use twinformer::train::TrainConfig;
use twinformer::{ModelConfig, TrackOptions};

/// Every section is optional; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture. Commands fall back to their own preset when absent.
    pub model: Option<ModelConfig>,
    pub training: TrainConfig,
    pub tracking: TrackOptions,
    pub data: DataConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Easy,
    Varied,
}

/// Synthetic training data, used when `paths.sequences` is unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: usize,
    pub kind: SynthKind,
    /// Seed of the first sequence; sequence `i` uses `seed + i`.
    pub seed: u64,
    /// Train on this many fixed pairs instead of fresh pairs every step.
    pub pairs: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            kind: SynthKind::Varied,
            seed: 0,
            pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    /// A sequence directory, or a directory of sequence directories.
    pub sequences: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            checkpoint: None,
            sequences: None,
            output: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| twinformer::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(twinformer::Error::from)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.training.validate()?;
        self.tracking.validate()?;
        if self.data.sequences == 0 || self.data.pairs == Some(0) {
            Err(twinformer::Error::Config(
                "data.sequences and data.pairs must be at least 1".into(),
            ))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file_parses() {
        let text = r#"
[model]
embed_dim = 16
window = 2
lab_depths = [2, 2, 2]
heads = [1, 2, 2]
template_size = 32
search_size = 64

[training]
steps = 10
seed = 3
optimizer = { kind = "adamw", learning_rate = 0.002 }
schedule = "cosine"
loss = { giou = 2.0, l1 = 5.0 }

[tracking]
mode = "st"
search_factor = 4.0

[data]
sequences = 5
kind = "easy"
pairs = 20

[paths]
checkpoint = "runs/model.twck"
output = "out"
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.as_ref().unwrap().embed_dim, 16);
        assert_eq!(cfg.training.steps, 10);
        assert_eq!(cfg.tracking.mode, twinformer::TrackMode::St);
        assert_eq!(cfg.data.pairs, Some(20));
        assert_eq!(cfg.paths.output, PathBuf::from("out"));
        assert_eq!(RunConfig::parse(&toml::to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected_before_running() {
        assert!(RunConfig::parse("[model]\nembed_dim = 15\n").is_err());
        assert!(RunConfig::parse("[training]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::parse("[data]\nsequences = 0\n").is_err());
        assert!(RunConfig::parse("[paths]\nbogus = 1\n").is_err());
    }
}
