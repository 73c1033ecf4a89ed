use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::Preset;
use crate::synth::Augmentation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub preset: Preset,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub seed: u64,
    /// Fraction of training scenes used, in (0, 1].
    pub data_fraction: f64,
    /// Candidate augmentations for the second view, drawn uniformly per item.
    pub augmentations: Vec<Augmentation>,
    /// Validation items used to track the graph-vector spread.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            preset: Preset::Desk,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 15,
            lr_decay: 0.1,
            lr_period: 10,
            seed: 0,
            data_fraction: 1.0,
            augmentations: vec![Augmentation::MILD_JITTER, Augmentation::SMALL_NOISE_CROP],
            probe_size: 256,
        }
    }

    pub fn paper() -> Self {
        TrainConfig { preset: Preset::Paper, lr: 1e-4, epochs: 50, lr_period: 20, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { path: format!("train.{field}"), reason: reason.into() });
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2 (batch norm)");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must lie in (0, 1]");
        }
        if self.lr_period == 0 {
            return bad("lr_period", "must be positive");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction", "must lie in (0, 1]");
        }
        if self.loss.needs_second_view() && self.augmentations.is_empty() {
            return bad("augmentations", "similarity variants need at least one view augmentation");
        }
        for a in &self.augmentations {
            a.validate().map_err(|e| Error::Config { path: "train.augmentations".into(), reason: e.to_string() })?;
        }
        if self.probe_size == 0 {
            return bad("probe_size", "must be positive");
        }
        Ok(())
    }
}
