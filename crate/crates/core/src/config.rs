//! Run configuration files: flat JSON documents holding training
//! hyperparameters.
//!
//! Parsing is strict — an unknown key is a fatal error naming the key,
//! so a typo cannot silently fall back to a default and poison an
//! experiment record.  Every key is optional; absent keys keep the
//! value of the base configuration they are applied to.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::training::{OptimizerKind, TrainConfig};

/// A parsed configuration document.  `chi` is the hidden-state width.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps_adam: Option<f64>,
    pub dropout: Option<f64>,
    pub init_std: Option<f64>,
    pub seed: Option<u64>,
    pub chi: Option<usize>,
}

impl ConfigFile {
    /// Overlay the document's values onto a base configuration.
    pub fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.optimizer {
            base.optimizer = v;
        }
        if let Some(v) = self.beta1 {
            base.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            base.beta2 = v;
        }
        if let Some(v) = self.eps_adam {
            base.eps_adam = v;
        }
        if let Some(v) = self.dropout {
            base.dropout = v;
        }
        if let Some(v) = self.init_std {
            base.init_std = v;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        if let Some(v) = self.chi {
            base.hidden_dim = v;
        }
        base
    }
}

/// Parse a configuration document.  Errors carry the line and column
/// of the offending token.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
}

/// Read and parse a configuration file.
pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
