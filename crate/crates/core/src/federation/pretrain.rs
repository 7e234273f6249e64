use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::math::Rng;
use crate::model::{train_step, Adam, AdamConfig, SlmModel, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Train the base here; when false, `checkpoint` must name a base model.
    pub enabled: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: 600,
            batch_size: 16,
            lr: 3e-3,
            checkpoint: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.enabled {
            if self.steps == 0 {
                errors.push("pretrain.steps must be at least 1".into());
            }
            if self.batch_size == 0 {
                errors.push("pretrain.batch_size must be at least 1".into());
            }
            if !(self.lr > 0.0 && self.lr.is_finite()) {
                errors.push(format!("pretrain.lr must be positive, got {}", self.lr));
            }
        } else if self.checkpoint.is_none() {
            errors.push("pretrain.checkpoint is required when pretraining is disabled".into());
        }
    }
}

/// Centralized training of every base parameter on `data`. Batches walk
/// through seeded shuffles of the data, reshuffling at each pass. Returns
/// the loss of every step.
pub fn pretrain(model: &mut SlmModel, data: &[Example], cfg: &PretrainConfig, rng: &Rng) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Input("no pretraining data".into()));
    }
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                rng.fork(pass).shuffle(&mut order);
                pass += 1;
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let loss = train_step(model, &batch, &mut opt, Trainable::Base)
            .map_err(|e| Error::Numeric(format!("pretraining diverged at step {step}: {e}")))?;
        losses.push(loss as f64);
    }
    Ok(losses)
}
