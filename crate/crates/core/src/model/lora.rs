use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::aggregation::{NamedParamSet, ParamEntry};
use crate::error::{Error, Result};
use crate::math::{Matrix, Rng, SparseMask};
use crate::model::{ModelConfig, Projection};

/// Which projection of which source layer an adapter pair attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LoraTarget {
    pub layer: usize,
    pub proj: Projection,
}

impl LoraTarget {
    pub fn key(&self, m: AdapterMatrix) -> String {
        format!("lora.{}.{}.{}", self.layer, self.proj, m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdapterMatrix {
    A,
    B,
}

impl fmt::Display for AdapterMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMatrix::A => "A",
            AdapterMatrix::B => "B",
        })
    }
}

impl FromStr for AdapterMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(AdapterMatrix::A),
            "B" => Ok(AdapterMatrix::B),
            _ => Err(Error::Parse(format!("unknown adapter matrix {s:?}"))),
        }
    }
}

/// One low-rank pair: the update to a `d_out x d_in` weight is `scale·B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `rank x d_in`
    pub a: Matrix,
    /// `d_out x rank`
    pub b: Matrix,
    pub mask_a: Option<SparseMask>,
    pub mask_b: Option<SparseMask>,
}

impl LoraPair {
    pub fn apply_masks(&mut self) -> Result<()> {
        if let Some(m) = &self.mask_a {
            m.apply(&mut self.a)?;
        }
        if let Some(m) = &self.mask_b {
            m.apply(&mut self.b)?;
        }
        Ok(())
    }

    pub fn masks_respected(&self) -> bool {
        self.mask_a.as_ref().is_none_or(|m| m.is_respected_by(&self.a))
            && self.mask_b.as_ref().is_none_or(|m| m.is_respected_by(&self.b))
    }

    /// `B·A`, the unscaled dense update.
    pub fn delta(&self) -> Result<Matrix> {
        self.b.matmul(&self.a)
    }

    pub fn matrix(&self, which: AdapterMatrix) -> &Matrix {
        match which {
            AdapterMatrix::A => &self.a,
            AdapterMatrix::B => &self.b,
        }
    }

    pub fn matrix_mut(&mut self, which: AdapterMatrix) -> &mut Matrix {
        match which {
            AdapterMatrix::A => &mut self.a,
            AdapterMatrix::B => &mut self.b,
        }
    }

    pub fn mask(&self, which: AdapterMatrix) -> Option<&SparseMask> {
        match which {
            AdapterMatrix::A => self.mask_a.as_ref(),
            AdapterMatrix::B => self.mask_b.as_ref(),
        }
    }
}

/// All adapter pairs of a model, keyed by target.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub scale: f32,
    pub pairs: BTreeMap<LoraTarget, LoraPair>,
}

impl LoraAdapter {
    pub fn empty(scale: f32) -> Self {
        Self {
            scale,
            pairs: BTreeMap::new(),
        }
    }

    /// Standard initialization: `A ~ N(0, 1/d_in)`, `B = 0`, so the adapter
    /// starts as an exact no-op.
    pub fn init(cfg: &ModelConfig, layers: impl IntoIterator<Item = usize>, rng: &Rng) -> Self {
        let mut pairs = BTreeMap::new();
        for layer in layers {
            for &proj in &cfg.lora_targets {
                let (d_out, d_in) = proj.shape(cfg);
                let mut r = rng.fork_named(&format!("lora.{layer}.{proj}"));
                let a = Matrix::random_normal(cfg.lora_rank, d_in, 1.0 / (d_in as f64).sqrt(), &mut r);
                let b = Matrix::zeros(d_out, cfg.lora_rank);
                pairs.insert(
                    LoraTarget { layer, proj },
                    LoraPair {
                        a,
                        b,
                        mask_a: None,
                        mask_b: None,
                    },
                );
            }
        }
        Self {
            scale: cfg.lora_scale(),
            pairs,
        }
    }

    pub fn get(&self, t: &LoraTarget) -> Option<&LoraPair> {
        self.pairs.get(t)
    }

    pub fn apply_masks(&mut self) -> Result<()> {
        self.pairs.values_mut().try_for_each(LoraPair::apply_masks)
    }

    pub fn masks_respected(&self) -> bool {
        self.pairs.values().all(LoraPair::masks_respected)
    }

    /// Count of adapter positions that masks force to zero.
    pub fn masked_positions(&self) -> usize {
        self.pairs
            .values()
            .map(|p| {
                p.mask_a.as_ref().map_or(0, SparseMask::count_pruned)
                    + p.mask_b.as_ref().map_or(0, SparseMask::count_pruned)
            })
            .sum()
    }

    /// Adapter matrices as a federation payload, each with its mask.
    pub fn to_param_set(&self) -> NamedParamSet {
        let mut set = NamedParamSet::new();
        for (t, p) in &self.pairs {
            for m in [AdapterMatrix::A, AdapterMatrix::B] {
                set.insert(
                    t.key(m),
                    ParamEntry {
                        value: p.matrix(m).clone(),
                        mask: p.mask(m).cloned(),
                    },
                );
            }
        }
        set
    }

    /// Overwrites adapter values from a payload. Every present key must be
    /// known to this adapter with the same shape; masks are kept as-is and
    /// re-applied afterwards.
    pub fn load_values(&mut self, set: &NamedParamSet) -> Result<()> {
        for (t, p) in self.pairs.iter_mut() {
            for m in [AdapterMatrix::A, AdapterMatrix::B] {
                let key = t.key(m);
                let entry = set
                    .get(&key)
                    .ok_or_else(|| Error::Shape(format!("payload lacks adapter key {key}")))?;
                let dst = p.matrix_mut(m);
                if entry.value.shape() != dst.shape() {
                    return Err(Error::Shape(format!(
                        "{key}: payload {:?} vs adapter {:?}",
                        entry.value.shape(),
                        dst.shape()
                    )));
                }
                *dst = entry.value.clone();
            }
        }
        self.apply_masks()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_a_no_op_update() {
        let cfg = ModelConfig::default();
        let ad = LoraAdapter::init(&cfg, 0..2, &Rng::new(0));
        assert_eq!(ad.pairs.len(), 2);
        for p in ad.pairs.values() {
            assert_eq!(p.a.shape(), (4, 32));
            assert_eq!(p.b.shape(), (32, 4));
            assert_eq!(p.delta().unwrap().frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn payload_round_trip_keeps_masks() {
        let cfg = ModelConfig::default();
        let mut ad = LoraAdapter::init(&cfg, 0..1, &Rng::new(0));
        let t = LoraTarget {
            layer: 0,
            proj: Projection::Q,
        };
        ad.pairs.get_mut(&t).unwrap().mask_a = Some(SparseMask::zeros(4, 32));
        ad.apply_masks().unwrap();
        let mut set = ad.to_param_set();
        assert_eq!(set.len(), 2);
        set.get_mut("lora.0.q.A").unwrap().value = Matrix::filled(4, 32, 1.0);
        ad.load_values(&set).unwrap();
        assert_eq!(ad.pairs[&t].a.count_zeros(), 128);
        assert!(ad.masks_respected());
    }
}
