use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multipliers and optimizer settings of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Rate multiplier.
    pub beta: f64,
    /// Sparse-selection multiplier.
    pub gamma: f64,
    /// Loss added per starved receiver.
    pub penalty: f64,
    pub batch_size: usize,
    pub lr_coding: f64,
    pub lr_selection: f64,
    pub epochs: usize,
    /// Leave-one-out reward baseline for the selector update.
    pub baseline: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 1e-3,
            gamma: 0.0,
            penalty: 1.0,
            batch_size: 20,
            lr_coding: 1e-4,
            lr_selection: 5e-5,
            epochs: 2000,
            baseline: true,
        }
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and >= 0, got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and > 0, got {v}")))
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("objective.beta", self.beta)?;
        non_negative("objective.gamma", self.gamma)?;
        positive("objective.penalty", self.penalty)?;
        positive("objective.lr_coding", self.lr_coding)?;
        positive("objective.lr_selection", self.lr_selection)?;
        if self.batch_size < 2 {
            return Err(Error::config("objective.batch_size", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("objective.epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Network widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub cr_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub selector_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 24,
            cr_dim: 24,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![512, 256],
            selector_hidden: vec![512, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be positive"));
        }
        if self.cr_dim == 0 {
            return Err(Error::config("model.cr_dim", "must be positive"));
        }
        for (field, h) in [
            ("model.encoder_hidden", &self.encoder_hidden),
            ("model.decoder_hidden", &self.decoder_hidden),
            ("model.selector_hidden", &self.selector_hidden),
        ] {
            if h.contains(&0) {
                return Err(Error::config(field, "widths must be positive"));
            }
        }
        Ok(())
    }
}
