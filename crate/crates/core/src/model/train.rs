use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{ParamKey, SlmModel, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamKey, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, key: ParamKey, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!("gradient for {key} has the wrong shape")));
        }
        let c = self.config;
        let (m, v) = self.moments.entry(key).or_insert_with(|| {
            (
                Matrix::zeros(param.rows(), param.cols()),
                Matrix::zeros(param.rows(), param.cols()),
            )
        });
        let t = self.step as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            let mhat = *mi as f64 / bc1;
            let vhat = *vi as f64 / bc2;
            *p -= (c.lr as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
        }
        Ok(())
    }
}

/// One optimizer step on the mean cross-entropy of `batch`.
///
/// Only `trainable` parameters move. Afterwards adapter masks (fine-tuning)
/// or base pruning masks (base training) are re-applied so pruned entries
/// stay exactly zero. Returns the pre-update loss.
pub fn train_step(model: &mut SlmModel, batch: &[Example], opt: &mut Adam, trainable: Trainable) -> Result<f32> {
    let (loss, grads) = model.batch_gradients(batch, trainable)?;
    opt.begin_step();
    for (key, grad) in &grads {
        let param = model
            .param_mut(*key)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {key}")))?;
        opt.update(*key, param, grad)?;
        if !param.is_finite() {
            return Err(Error::Numeric(format!("parameter {key} became non-finite")));
        }
    }
    match trainable {
        Trainable::Adapter => model.adapter.apply_masks()?,
        Trainable::Base => model.reapply_base_masks()?,
        Trainable::Nothing => {}
    }
    Ok(loss as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Example};
    use crate::math::{Rng, SparseMask};
    use crate::model::{LoraTarget, ModelConfig, Projection};

    fn batch() -> Vec<Example> {
        vec![
            Example::new(Domain::Reverse, "abcd", "dcba").unwrap(),
            Example::new(Domain::Copy, "xyz", "xyz").unwrap(),
            Example::new(Domain::Arithmetic, "12+30", "42").unwrap(),
            Example::new(Domain::SortDigits, "3912", "1239").unwrap(),
        ]
    }

    #[test]
    fn overfits_a_single_batch_with_adapters() {
        // A query-only rank-4 adapter on a random base lacks the capacity to
        // memorize; adapting every projection does not.
        let cfg = ModelConfig {
            lora_targets: Projection::ALL.to_vec(),
            ..ModelConfig::default()
        };
        let mut m = SlmModel::new(cfg, &Rng::new(8)).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        let b = batch();
        let first = train_step(&mut m, &b, &mut opt, Trainable::Adapter).unwrap();
        for _ in 1..50 {
            train_step(&mut m, &b, &mut opt, Trainable::Adapter).unwrap();
        }
        let (last, _) = m.batch_gradients(&b, Trainable::Nothing).unwrap();
        let last = last as f32;
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn base_is_bit_unchanged_by_fine_tuning() {
        let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(9)).unwrap();
        let before = m.base.digest();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            train_step(&mut m, &batch(), &mut opt, Trainable::Adapter).unwrap();
        }
        assert_eq!(m.base.digest(), before);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(10)).unwrap();
            let mut opt = Adam::new(AdamConfig::default());
            train_step(&mut m, &batch(), &mut opt, Trainable::Adapter).unwrap();
            m.adapter
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_adapter_entries_stay_zero() {
        let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(11)).unwrap();
        let mut rng = Rng::new(12);
        for p in m.adapter.pairs.values_mut() {
            let bits_a = (0..p.a.len()).map(|_| rng.bernoulli(0.3)).collect();
            let bits_b = (0..p.b.len()).map(|_| rng.bernoulli(0.3)).collect();
            p.mask_a = Some(SparseMask::from_bools(p.a.rows(), p.a.cols(), bits_a).unwrap());
            p.mask_b = Some(SparseMask::from_bools(p.b.rows(), p.b.cols(), bits_b).unwrap());
        }
        m.adapter.apply_masks().unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for _ in 0..5 {
            train_step(&mut m, &batch(), &mut opt, Trainable::Adapter).unwrap();
            assert!(m.adapter.masks_respected());
        }
        let t = LoraTarget {
            layer: 0,
            proj: Projection::Q,
        };
        assert!(m.adapter.pairs[&t].b.frobenius_norm() > 0.0);
    }

    #[test]
    fn empty_batch_is_an_input_error() {
        let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(13)).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(
            train_step(&mut m, &[], &mut opt, Trainable::Adapter),
            Err(Error::Input(_))
        ));
    }
}
