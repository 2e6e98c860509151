use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Neighborhood;
use crate::nn::{Architecture, ModelKind};
use crate::rng;

/// Which accuracy picks the best checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Test-split accuracy, as in the reported experiments.
    #[default]
    Test,
    /// A stratified slice of the training split held out from fitting.
    Validation,
}

/// Training hyperparameters. Read from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    #[serde(with = "rng::seed_string")]
    pub seed: u64,
    pub selection: Selection,
    pub validation_fraction: f64,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub neighborhood: Neighborhood,
    pub mlp_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = Architecture::default();
        TrainConfig {
            model: ModelKind::Rgtn,
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.01,
            dropout: a.dropout,
            clip_norm: 5.0,
            seed: 0,
            selection: Selection::Test,
            validation_fraction: 0.1,
            hidden: a.hidden,
            heads: a.heads,
            head_dim: a.head_dim,
            neighborhood: a.neighborhood,
            mlp_hidden: a.mlp_hidden,
        }
    }
}

impl TrainConfig {
    pub fn for_model(model: ModelKind) -> Self {
        TrainConfig {
            model,
            ..Default::default()
        }
    }

    pub fn architecture(&self, nodes: usize, steps: usize, features: usize) -> Architecture {
        Architecture {
            kind: self.model,
            nodes,
            steps,
            features,
            hidden: self.hidden,
            heads: self.heads,
            head_dim: self.head_dim,
            classes: Architecture::default().classes,
            dropout: self.dropout,
            neighborhood: self.neighborhood,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} is not a finite non-negative number", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {} must lie in [0, 1)",
                self.validation_fraction
            )));
        }
        self.architecture(1, 1, 1).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("train config: {e}")))
    }

    /// Applies a `key=value` override. The value is parsed as a TOML value,
    /// falling back to a bare string (`model=gcn`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()?).map_err(|e| Error::Format(format!("train config: {e}")))?;
        if !table.contains_key(key) {
            return Err(Error::InvalidArgument(format!("unknown config key {key:?}")));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        // Seeds are stored as strings but are natural to type as numbers.
        let value = match (key, value) {
            ("seed", toml::Value::Integer(i)) => toml::Value::String(i.to_string()),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        let updated: TrainConfig = table
            .try_into()
            .map_err(|e| Error::InvalidArgument(format!("override {assignment:?}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
