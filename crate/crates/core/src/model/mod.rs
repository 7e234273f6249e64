//! Tiny decoder-only transformer with low-rank adapters on selected projections.

mod forward;
mod lora;
mod train;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{projection, Bound, ForwardPass, Trainable};
pub use lora::{AdapterMatrix, LoraAdapter, LoraPair, LoraTarget};
pub use train::{train_step, Adam, AdamConfig};
pub use weights::{BaseWeights, Block, SlmModel};

/// Weight matrices inside a transformer block. Each is stored `out x in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Up,
        Projection::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    /// `(out, in)` for a given config.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::Up => (cfg.mlp_hidden, cfg.d_model),
            Projection::Down => (cfg.d_model, cfg.mlp_hidden),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown projection {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_targets: Vec<Projection>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::corpus::VOCAB_SIZE,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 32,
            mlp_hidden: 128,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_targets: vec![Projection::Q],
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errors.push(format!("model.{msg}"));
            }
        };
        check(self.vocab_size > 0, "vocab_size must be positive");
        check(self.d_model > 0, "d_model must be positive");
        check(self.n_heads > 0, "n_heads must be positive");
        check(
            self.n_heads == 0 || self.d_model.is_multiple_of(self.n_heads),
            "d_model must be divisible by n_heads",
        );
        check(self.n_layers > 0, "n_layers must be positive");
        check(self.max_seq_len > 0, "max_seq_len must be positive");
        check(self.mlp_hidden > 0, "mlp_hidden must be positive");
        check(self.lora_rank >= 1, "lora_rank must be at least 1");
        check(self.lora_rank <= self.d_model, "lora_rank must not exceed d_model");
        check(
            self.lora_alpha.is_finite() && self.lora_alpha > 0.0,
            "lora_alpha must be positive and finite",
        );
        check(
            !self.lora_targets.is_empty(),
            "lora_targets must name at least one projection",
        );
        let mut seen = self.lora_targets.clone();
        seen.sort();
        seen.dedup();
        check(
            seen.len() == self.lora_targets.len(),
            "lora_targets contains duplicates",
        );
    }

    pub fn validated(self) -> Result<Self> {
        let mut errors = Vec::new();
        self.validate(&mut errors);
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Identifies one parameter matrix of a model.
///
/// Base keys index blocks by position in the model; adapter keys use the
/// source layer index of the unpruned model so they line up across clients
/// that dropped different layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    TokenEmbedding,
    PositionEmbedding,
    AttnNorm(usize),
    MlpNorm(usize),
    Weight(usize, Projection),
    FinalNorm,
    Head,
    Lora(LoraTarget, AdapterMatrix),
}

impl ParamKey {
    pub fn is_adapter(&self) -> bool {
        matches!(self, ParamKey::Lora(..))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::TokenEmbedding => write!(f, "tok_emb"),
            ParamKey::PositionEmbedding => write!(f, "pos_emb"),
            ParamKey::AttnNorm(i) => write!(f, "blocks.{i}.attn_norm"),
            ParamKey::MlpNorm(i) => write!(f, "blocks.{i}.mlp_norm"),
            ParamKey::Weight(i, p) => write!(f, "blocks.{i}.{p}"),
            ParamKey::FinalNorm => write!(f, "final_norm"),
            ParamKey::Head => write!(f, "head"),
            ParamKey::Lora(t, m) => write!(f, "{}", t.key(*m)),
        }
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unrecognized parameter name {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        let idx = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(match parts.as_slice() {
            ["tok_emb"] => ParamKey::TokenEmbedding,
            ["pos_emb"] => ParamKey::PositionEmbedding,
            ["final_norm"] => ParamKey::FinalNorm,
            ["head"] => ParamKey::Head,
            ["blocks", i, "attn_norm"] => ParamKey::AttnNorm(idx(i)?),
            ["blocks", i, "mlp_norm"] => ParamKey::MlpNorm(idx(i)?),
            ["blocks", i, p] => ParamKey::Weight(idx(i)?, p.parse()?),
            ["lora", l, p, m] => ParamKey::Lora(
                LoraTarget {
                    layer: idx(l)?,
                    proj: p.parse()?,
                },
                m.parse()?,
            ),
            _ => return Err(bad()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(ModelConfig::default().validated().is_ok());
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            lora_rank: 0,
            ..ModelConfig::default()
        };
        match cfg.validated() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn param_names_round_trip() {
        let keys = [
            ParamKey::TokenEmbedding,
            ParamKey::AttnNorm(3),
            ParamKey::Weight(1, Projection::Down),
            ParamKey::Lora(
                LoraTarget {
                    layer: 2,
                    proj: Projection::Q,
                },
                AdapterMatrix::B,
            ),
        ];
        for k in keys {
            assert_eq!(k.to_string().parse::<ParamKey>().unwrap(), k);
        }
        assert!("blocks.x.q".parse::<ParamKey>().is_err());
    }
}
