//! Run configuration: a TOML file with one table per component, overridden
//! by command-line flags, resolved once before any work starts.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! vocab_size = 400
//! pool_size = 10
//!
//! [encoder]
//! num_layers = 2
//! model_dim = 64
//!
//! [training]
//! steps = 2000
//! freeze_encoder = false
//! ```
//!
//! Missing keys take the defaults below; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DecoderConfig, EncoderConfig};
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub vocab_size: usize,
    pub pool_size: usize,
    pub num_objects: usize,
    pub num_turns: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            vocab_size: 400,
            pool_size: 10,
            num_objects: 20,
            num_turns: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout_rate: f32,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::desk(0);
        Self {
            num_layers: e.num_layers,
            model_dim: e.model_dim,
            num_heads: e.num_heads,
            ffn_dim: e.ffn_dim,
            max_positions: e.max_positions,
            dropout_rate: e.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub max_positions: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let d = DecoderConfig::desk(0);
        Self {
            num_layers: d.num_layers,
            model_dim: d.model_dim,
            num_heads: d.num_heads,
            max_positions: d.max_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub freeze_encoder: bool,
    pub grad_clip_norm: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            freeze_encoder: t.freeze_encoder,
            grad_clip_norm: t.grad_clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub grounding: bool,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self { grounding: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub decoder: DecoderSection,
    pub training: TrainingSection,
    pub scoring: ScoringSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: origin.clone(),
            source,
        })?;
        Self::from_toml(&text, &origin)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            num_layers: e.num_layers,
            model_dim: e.model_dim,
            num_heads: e.num_heads,
            ffn_dim: e.ffn_dim,
            max_positions: e.max_positions,
            vocab_size,
            dropout_rate: e.dropout_rate,
        }
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        let d = &self.decoder;
        DecoderConfig {
            num_layers: d.num_layers,
            model_dim: d.model_dim,
            num_heads: d.num_heads,
            vocab_size,
            max_positions: d.max_positions,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            seed: self.seed,
            freeze_encoder: t.freeze_encoder,
            grad_clip_norm: t.grad_clip_norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[training]\nsteps = 10\n", "t").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.training.steps, 10);
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.encoder, EncoderSection::default());
        assert_eq!(c.train_config().seed, 3);
    }

    #[test]
    fn round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), "t").unwrap(), c);
        let err = RunConfig::from_toml("[encoder]\nlayers = 2\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().contains("cfg.toml"));
    }
}
