//! Run configuration: a TOML file with `[model]`, `[world]`,
//! `[pretrain]`, `[edit]`, and `[metrics]` sections, all optional,
//! plus command-line overrides for the common edit knobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use icelab_core::editing::{EditConfig, Variant};
use icelab_core::metrics::MetricsConfig;
use icelab_core::model::{Architecture, ModelConfig, PretrainConfig};

use crate::{HarnessError, Result};

/// Synthetic-world generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default = "default_world_seed")]
    pub seed: u64,
    #[serde(default = "default_entities")]
    pub entities: usize,
    #[serde(default = "default_relations")]
    pub relations: usize,
    #[serde(default = "default_edits")]
    pub edits: usize,
}

fn default_world_seed() -> u64 {
    7
}
fn default_entities() -> usize {
    24
}
fn default_relations() -> usize {
    3
}
fn default_edits() -> usize {
    10
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: default_world_seed(),
            entities: default_entities(),
            relations: default_relations(),
            edits: default_edits(),
        }
    }
}

/// Everything one run needs. Every section may be omitted from the
/// TOML file; defaults describe the desk-scale reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Architecture and sizes. `vocab_size` is advisory: pretraining
    /// replaces it with the generated world's actual vocabulary size,
    /// and editing reads sizes from the checkpoint.
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Horizon of the exact consistency-gap probe.
    #[serde(default = "default_probe_len")]
    pub probe_len: usize,
    /// Base seed for edit-time sampling; record `i` uses `seed + i`.
    #[serde(default)]
    pub seed: u64,
}

fn default_probe_len() -> usize {
    1
}

fn default_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        context_window: 32,
        architecture: Architecture::Transformer1Block,
        embed_dim: 32,
        head_count: 4,
        editable_param_names: Vec::new(),
        seed: 11,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: default_model(),
            world: WorldConfig::default(),
            pretrain: PretrainConfig::default(),
            edit: EditConfig::default(),
            metrics: MetricsConfig::default(),
            probe_len: default_probe_len(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::io(&format!("reading {}", path.display()), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| HarnessError::Usage(format!("parsing {}: {e}", path.display())))?;
        cfg.edit.validate().map_err(HarnessError::from)?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

/// Edit knobs exposed as command-line flags; `None` keeps the config
/// file's value.
#[derive(Debug, Clone, Default)]
pub struct EditOverrides {
    pub variant: Option<String>,
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
    pub samples: Option<usize>,
    pub sample_len: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub clip: Option<f64>,
    pub clamp: Option<f64>,
    pub seed: Option<u64>,
}

impl EditOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(name) = &self.variant {
            cfg.edit.variant = Variant::parse(name).ok_or_else(|| {
                HarnessError::Usage(format!(
                    "unknown variant {name:?}; expected one of {}",
                    Variant::all().map(|v| v.name()).join(", ")
                ))
            })?;
        }
        if let Some(v) = self.lambda {
            cfg.edit.lambda = v;
        }
        if let Some(v) = self.temperature {
            cfg.edit.temperature = v;
        }
        if let Some(v) = self.samples {
            cfg.edit.samples = v;
        }
        if let Some(v) = self.sample_len {
            cfg.edit.sample_len = v;
        }
        if let Some(v) = self.steps {
            cfg.edit.max_steps = v;
        }
        if let Some(v) = self.lr {
            cfg.edit.eta = v;
        }
        if let Some(v) = self.clip {
            cfg.edit.grad_clip = v;
        }
        if let Some(v) = self.clamp {
            cfg.edit.weight_clamp = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.edit.validate().map_err(HarnessError::from)
    }
}
