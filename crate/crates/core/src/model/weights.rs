use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{Matrix, Rng, SparseMask};
use crate::model::{AdapterMatrix, LoraAdapter, ModelConfig, ParamKey, Projection};

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Layer index in the unpruned model this block came from.
    pub source_index: usize,
    pub attn_norm: Matrix,
    pub mlp_norm: Matrix,
    /// Indexed by [`Projection::index`].
    pub proj: [Matrix; 6],
}

impl Block {
    pub fn weight(&self, p: Projection) -> &Matrix {
        &self.proj[p.index()]
    }

    pub fn weight_mut(&mut self, p: Projection) -> &mut Matrix {
        &mut self.proj[p.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Matrix,
    pub head: Matrix,
}

impl BaseWeights {
    pub fn init(cfg: &ModelConfig, rng: &Rng) -> Self {
        let d = cfg.d_model;
        let mut r = rng.fork_named("base");
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let proj = Projection::ALL.map(|p| {
                    let (out, inp) = p.shape(cfg);
                    let mut std = 1.0 / (inp as f64).sqrt();
                    if matches!(p, Projection::O | Projection::Down) {
                        std *= residual_scale;
                    }
                    Matrix::random_normal(out, inp, std, &mut r)
                });
                Block {
                    source_index: i,
                    attn_norm: Matrix::filled(1, d, 1.0),
                    mlp_norm: Matrix::filled(1, d, 1.0),
                    proj,
                }
            })
            .collect();
        Self {
            tok_emb: Matrix::random_normal(cfg.vocab_size, d, 0.5, &mut r),
            pos_emb: Matrix::random_normal(cfg.max_seq_len, d, 0.1, &mut r),
            blocks,
            final_norm: Matrix::filled(1, d, 1.0),
            head: Matrix::random_normal(cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut r),
        }
    }

    /// Every base parameter in canonical order.
    pub fn parameters(&self) -> Vec<(ParamKey, &Matrix)> {
        let mut out = vec![
            (ParamKey::TokenEmbedding, &self.tok_emb),
            (ParamKey::PositionEmbedding, &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((ParamKey::AttnNorm(i), &b.attn_norm));
            out.push((ParamKey::MlpNorm(i), &b.mlp_norm));
            for p in Projection::ALL {
                out.push((ParamKey::Weight(i, p), b.weight(p)));
            }
        }
        out.push((ParamKey::FinalNorm, &self.final_norm));
        out.push((ParamKey::Head, &self.head));
        out
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Matrix> {
        Some(match key {
            ParamKey::TokenEmbedding => &mut self.tok_emb,
            ParamKey::PositionEmbedding => &mut self.pos_emb,
            ParamKey::AttnNorm(i) => &mut self.blocks.get_mut(i)?.attn_norm,
            ParamKey::MlpNorm(i) => &mut self.blocks.get_mut(i)?.mlp_norm,
            ParamKey::Weight(i, p) => self.blocks.get_mut(i)?.weight_mut(p),
            ParamKey::FinalNorm => &mut self.final_norm,
            ParamKey::Head => &mut self.head,
            ParamKey::Lora(..) => return None,
        })
    }

    /// SHA-256 over shapes and raw bits of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, m) in self.parameters() {
            h.update(k.to_string().as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A (possibly pruned) model: frozen base weights, their masks, and adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct SlmModel {
    pub config: ModelConfig,
    pub base: BaseWeights,
    /// Pruning masks keyed by (block position, projection). Absent means dense.
    pub masks: BTreeMap<(usize, Projection), SparseMask>,
    pub adapter: LoraAdapter,
    /// Fraction of maskable weights removed (or of blocks, for layer pruning).
    pub sparsity_level: f64,
    /// Layer count of the unpruned source model.
    pub source_layers: usize,
}

impl SlmModel {
    /// Fresh dense model with adapters on every layer.
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        let config = config.validated()?;
        let base = BaseWeights::init(&config, rng);
        let adapter = LoraAdapter::init(&config, 0..config.n_layers, &rng.fork_named("adapter"));
        Ok(Self {
            source_layers: config.n_layers,
            config,
            base,
            masks: BTreeMap::new(),
            adapter,
            sparsity_level: 0.0,
        })
    }

    pub fn source_layer_indices(&self) -> Vec<usize> {
        self.base.blocks.iter().map(|b| b.source_index).collect()
    }

    /// Base plus adapter parameters in canonical order.
    pub fn parameters(&self) -> Vec<(ParamKey, &Matrix)> {
        let mut out = self.base.parameters();
        for (t, p) in &self.adapter.pairs {
            out.push((ParamKey::Lora(*t, AdapterMatrix::A), &p.a));
            out.push((ParamKey::Lora(*t, AdapterMatrix::B), &p.b));
        }
        out
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Matrix> {
        match key {
            ParamKey::Lora(t, m) => self.adapter.pairs.get_mut(&t).map(|p| p.matrix_mut(m)),
            _ => self.base.param_mut(key),
        }
    }

    pub fn maskable_weight_count(&self) -> usize {
        self.base
            .blocks
            .iter()
            .map(|b| b.proj.iter().map(Matrix::len).sum::<usize>())
            .sum()
    }

    /// Zeroed fraction of projection weights according to the masks.
    pub fn masked_fraction(&self) -> f64 {
        let pruned: usize = self.masks.values().map(SparseMask::count_pruned).sum();
        pruned as f64 / self.maskable_weight_count().max(1) as f64
    }

    /// Installs pruning masks, zeroes the pruned base weights and records the
    /// realized sparsity.
    pub fn apply_pruning(&mut self, masks: BTreeMap<(usize, Projection), SparseMask>) -> Result<()> {
        for (&(i, p), m) in &masks {
            let w = self
                .base
                .blocks
                .get_mut(i)
                .ok_or_else(|| Error::Shape(format!("mask for missing block {i}")))?
                .weight_mut(p);
            m.apply(w)?;
        }
        self.masks = masks;
        self.sparsity_level = self.masked_fraction();
        Ok(())
    }

    pub fn reapply_base_masks(&mut self) -> Result<()> {
        for (&(i, p), m) in &self.masks {
            m.apply(self.base.blocks[i].weight_mut(p))?;
        }
        Ok(())
    }

    /// Every masked base position holds exactly 0.0.
    pub fn base_masks_respected(&self) -> bool {
        self.masks
            .iter()
            .all(|(&(i, p), m)| self.base.blocks.get(i).is_some_and(|b| m.is_respected_by(b.weight(p))))
    }

    /// Base weights with every adapter folded in: `W + scale·B·A`, then the
    /// base mask re-applied so pruned positions stay zero.
    pub fn merge_adapter(&self) -> Result<BaseWeights> {
        let mut merged = self.base.clone();
        for (pos, block) in merged.blocks.iter_mut().enumerate() {
            for p in Projection::ALL {
                let target = crate::model::LoraTarget {
                    layer: block.source_index,
                    proj: p,
                };
                let Some(pair) = self.adapter.get(&target) else {
                    continue;
                };
                let delta = pair.delta()?.scale(self.adapter.scale);
                let w = block.weight_mut(p);
                w.add_assign(&delta)?;
                if let Some(mask) = self.masks.get(&(pos, p)) {
                    mask.apply(w)?;
                }
            }
        }
        Ok(merged)
    }

    /// The merged weights as a standalone model with no adapters.
    pub fn merged(&self) -> Result<SlmModel> {
        Ok(SlmModel {
            config: self.config.clone(),
            base: self.merge_adapter()?,
            masks: self.masks.clone(),
            adapter: LoraAdapter::empty(self.adapter.scale),
            sparsity_level: self.sparsity_level,
            source_layers: self.source_layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraTarget;

    #[test]
    fn merge_reapplies_the_base_mask() {
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            mlp_hidden: 2,
            lora_rank: 1,
            lora_alpha: 1.0,
            ..ModelConfig::default()
        };
        let mut m = SlmModel::new(cfg, &Rng::new(0)).unwrap();
        *m.base.blocks[0].weight_mut(Projection::Q) = Matrix::identity(2);
        let mut masks = BTreeMap::new();
        masks.insert(
            (0, Projection::Q),
            SparseMask::from_bools(2, 2, vec![true, false, false, true]).unwrap(),
        );
        m.apply_pruning(masks).unwrap();
        // B·A = [[.5,.5],[.5,.5]]
        let t = LoraTarget {
            layer: 0,
            proj: Projection::Q,
        };
        let pair = m.adapter.pairs.get_mut(&t).unwrap();
        pair.a = Matrix::from_rows(&[&[1.0, 1.0]]);
        pair.b = Matrix::from_rows(&[&[0.5], &[0.5]]);
        let merged = m.merge_adapter().unwrap();
        assert_eq!(
            merged.blocks[0].weight(Projection::Q),
            &Matrix::from_rows(&[&[1.5, 0.0], &[0.0, 1.5]])
        );
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let m = SlmModel::new(ModelConfig::default(), &Rng::new(1)).unwrap();
        assert_eq!(m.merge_adapter().unwrap(), m.base);
    }

    #[test]
    fn dense_merge_adds_the_scaled_update() {
        let mut m = SlmModel::new(ModelConfig::default(), &Rng::new(2)).unwrap();
        let mut rng = Rng::new(3);
        for p in m.adapter.pairs.values_mut() {
            p.b = Matrix::random_normal(p.b.rows(), p.b.cols(), 0.1, &mut rng);
        }
        let merged = m.merge_adapter().unwrap();
        let t = LoraTarget {
            layer: 1,
            proj: Projection::Q,
        };
        let pair = &m.adapter.pairs[&t];
        let want = m.base.blocks[1]
            .weight(Projection::Q)
            .add(&pair.delta().unwrap().scale(m.adapter.scale))
            .unwrap();
        assert_eq!(merged.blocks[1].weight(Projection::Q), &want);
    }

    #[test]
    fn digest_tracks_bits() {
        let m = SlmModel::new(ModelConfig::default(), &Rng::new(4)).unwrap();
        let mut n = m.clone();
        assert_eq!(m.base.digest(), n.base.digest());
        n.base.head.data_mut()[0] += 1e-7;
        assert_ne!(m.base.digest(), n.base.digest());
    }
}
