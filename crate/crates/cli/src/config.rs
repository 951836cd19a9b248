//! Run configuration: a TOML file with `[model]` and `[train]` sections,
//! built-in presets, and flag-level overrides applied on top.
//!
//! ```toml
//! [model]
//! hidden = 64
//! blocks = 4
//! dropout = 0.1
//! k0 = -0.1
//! state = 16
//! conv_width = 4
//! expansion = 2
//! alignment_norm = "row_l2"   # or "frobenius"
//! gate_source = "visual"      # or "audio"
//! alignment_tap = "encoder"   # or "post_blocks"
//!
//! [train]
//! lr = 1e-4
//! batch_size = 32
//! epochs = 30
//! log_every = 1
//! grad_clip = 1.0
//! # max_steps = 500
//! ```
//!
//! Input widths and the vocabulary are never configured here; they come
//! from the dataset manifest's spec echo.

use std::path::Path;

use hyperssm_core::data::SyntheticSpec;
use hyperssm_core::fusion::GateSource;
use hyperssm_core::hyperbolic::SimilarityNorm;
use hyperssm_core::model::{AlignmentTap, ModelConfig, SsmSettings};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// `[model]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub k0: f64,
    pub state: usize,
    pub conv_width: usize,
    pub expansion: usize,
    pub alignment_norm: SimilarityNorm,
    pub gate_source: GateSource,
    pub alignment_tap: AlignmentTap,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden: 256,
            blocks: 4,
            dropout: 0.1,
            k0: -0.1,
            state: 16,
            conv_width: 4,
            expansion: 2,
            alignment_norm: SimilarityNorm::RowL2,
            gate_source: GateSource::Visual,
            alignment_tap: AlignmentTap::Encoder,
        }
    }
}

impl ModelSettings {
    /// Completes a [`ModelConfig`] with the data-determined widths.
    pub fn to_model_config(&self, spec: &SyntheticSpec) -> ModelConfig {
        let mut cfg = ModelConfig::new(
            spec.d_audio,
            spec.d_visual,
            spec.d_question,
            spec.vocab_size,
        );
        cfg.d_hidden = self.hidden;
        cfg.n_blocks = self.blocks;
        cfg.dropout = self.dropout;
        cfg.k0 = self.k0;
        cfg.ssm = SsmSettings {
            state: self.state,
            conv_width: self.conv_width,
            expansion: self.expansion,
        };
        cfg.alignment_norm = self.alignment_norm;
        cfg.gate_source = self.gate_source;
        cfg.alignment_tap = self.alignment_tap;
        cfg
    }
}

/// `[train]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, training stops after this many optimizer steps, cycling
    /// epochs as needed.
    pub max_steps: Option<usize>,
    pub log_every: usize,
    pub grad_clip: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            max_steps: None,
            log_every: 1,
            grad_clip: 1.0,
        }
    }
}

/// Whole run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSettings,
    pub train: TrainSettings,
}

impl RunConfig {
    /// Applies a named preset. `default` is the full-size configuration;
    /// `desk` is a small CPU-friendly setup for quick experiments
    /// (hidden 64, batch 8, lr 3e-3).
    pub fn apply_preset(&mut self, preset: &str) -> CliResult<()> {
        match preset {
            "default" => {
                self.model = ModelSettings::default();
                self.train = TrainSettings::default();
            }
            "desk" => {
                self.model = ModelSettings {
                    hidden: 64,
                    ..ModelSettings::default()
                };
                self.train = TrainSettings {
                    lr: 3e-3,
                    batch_size: 8,
                    ..TrainSettings::default()
                };
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown preset {other:?} (expected `default` or `desk`)"
                )))
            }
        }
        Ok(())
    }
}

/// Loads a TOML config file, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}
