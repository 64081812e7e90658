//! Run configuration, read from and written to JSON.

use serde::{Deserialize, Serialize};

/// Hyperparameters for the model and the optimizer.
///
/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Word embedding dimension `k_w`. Overridden by a pretrained file.
    pub word_dim: usize,
    /// Position embedding dimension `k_p`.
    pub pos_dim: usize,
    /// Convolution window widths, one filter bank each.
    pub window_widths: Vec<usize>,
    pub filters_per_width: usize,
    /// Threshold gate on bag-level relevance.
    pub beta: f64,
    pub dropout_keep: f64,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub decay_power: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Relative distances are clipped to `[-pos_clip, pos_clip]`.
    pub pos_clip: usize,
    pub max_sentence_len: usize,
    /// `false` replaces the fine-grained embedding layer by plain
    /// word + position concatenation.
    pub fine_grained: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 200,
            pos_dim: 5,
            window_widths: vec![3, 4, 5],
            filters_per_width: 200,
            beta: 0.0,
            dropout_keep: 0.5,
            lr_initial: 1e-2,
            lr_min: 1e-6,
            decay_power: 1.0,
            batch_size: 128,
            epochs: 20,
            pos_clip: 256,
            max_sentence_len: 256,
            fine_grained: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input row width `k = k_w + 2 k_p`.
    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }

    /// Sentence feature dimension `3 * total filters`.
    pub fn feature_dim(&self) -> usize {
        3 * self.filters_per_width * self.window_widths.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.word_dim == 0 || self.pos_dim == 0 {
            return fail("word_dim and pos_dim must be positive");
        }
        if self.window_widths.is_empty() || self.window_widths.contains(&0) {
            return fail("window_widths must be non-empty and positive");
        }
        if self.filters_per_width == 0 {
            return fail("filters_per_width must be positive");
        }
        if !(-1.0..=1.0).contains(&self.beta) {
            return fail("beta must lie in [-1, 1]");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return fail("dropout_keep must lie in (0, 1]");
        }
        if !(self.lr_initial >= self.lr_min && self.lr_min >= 0.0) {
            return fail("need lr_initial >= lr_min >= 0");
        }
        if self.decay_power <= 0.0 {
            return fail("decay_power must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive");
        }
        if self.max_sentence_len == 0 {
            return fail("max_sentence_len must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ModelConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json(&json).unwrap(), cfg);
        assert_eq!(cfg.input_dim(), 210);
        assert_eq!(cfg.feature_dim(), 1800);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = ModelConfig::from_json(r#"{"beta": 0.25, "epochs": 3}"#).unwrap();
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.batch_size, 128);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            ModelConfig::from_json(r#"{"betta": 0.1}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn out_of_range_beta_rejected() {
        assert!(matches!(
            ModelConfig::from_json(r#"{"beta": 2.0}"#),
            Err(ConfigError::Invalid(_))
        ));
    }
}
