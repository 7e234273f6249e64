//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "LEGOCKPT"
//! version      u32
//! header_len   u32
//! header       JSON (CheckpointHeader)
//! block_count  u32
//! block*       u16 name_len, name (UTF-8), u8 kind, u32 rows, u32 cols, payload
//! ```
//!
//! Kind 0 is an `f32` tensor (`rows·cols` values, row-major). Kind 1 is a
//! keep-mask packed as a bitset, least significant bit first. A mask block is
//! named after its parameter with a `.mask` suffix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Rng, SparseMask};
use crate::model::{AdapterMatrix, LoraAdapter, LoraPair, ModelConfig, ParamKey, SlmModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LEGOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_MASK: u8 = 1;
const MASK_SUFFIX: &str = ".mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub sparsity_level: f64,
    pub source_layers: usize,
    /// Source layer index of each stored block, in order.
    pub block_sources: Vec<usize>,
    pub adapter_scale: f32,
}

fn push_block(out: &mut Vec<u8>, name: &str, kind: u8, rows: usize, cols: usize, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

fn tensor_payload(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn checkpoint_to_bytes(model: &SlmModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        sparsity_level: model.sparsity_level,
        source_layers: model.source_layers,
        block_sources: model.source_layer_indices(),
        adapter_scale: model.adapter.scale,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;

    let mut blocks = Vec::new();
    let mut count = 0u32;
    for (key, m) in model.parameters() {
        push_block(
            &mut blocks,
            &key.to_string(),
            KIND_TENSOR,
            m.rows(),
            m.cols(),
            &tensor_payload(m),
        );
        count += 1;
    }
    for (&(i, p), mask) in &model.masks {
        let name = format!("{}{MASK_SUFFIX}", ParamKey::Weight(i, p));
        push_block(
            &mut blocks,
            &name,
            KIND_MASK,
            mask.rows(),
            mask.cols(),
            &mask.to_bitset(),
        );
        count += 1;
    }
    for (t, pair) in &model.adapter.pairs {
        for which in [AdapterMatrix::A, AdapterMatrix::B] {
            if let Some(mask) = pair.mask(which) {
                let name = format!("{}{MASK_SUFFIX}", t.key(which));
                push_block(
                    &mut blocks,
                    &name,
                    KIND_MASK,
                    mask.rows(),
                    mask.cols(),
                    &mask.to_bitset(),
                );
                count += 1;
            }
        }
    }

    let mut out = Vec::with_capacity(blocks.len() + header_json.len() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&blocks);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

enum Payload {
    Tensor(Matrix),
    Mask(SparseMask),
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<SlmModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;

    let count = r.u32()?;
    let mut blocks: BTreeMap<String, Payload> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Parse("block name is not UTF-8".into()))?
            .to_string();
        let kind = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Parse(format!("block {name} is too large")))?;
        let payload = match kind {
            KIND_TENSOR => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse("block too large".into()))?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect();
                Payload::Tensor(Matrix::from_vec(rows, cols, data)?)
            }
            KIND_MASK => Payload::Mask(SparseMask::from_bitset(rows, cols, r.take(n.div_ceil(8))?)?),
            k => return Err(Error::Parse(format!("block {name} has unknown kind {k}"))),
        };
        if blocks.insert(name.clone(), payload).is_some() {
            return Err(Error::Parse(format!("duplicate block {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after the last block".into()));
    }
    assemble(header, blocks)
}

fn assemble(header: CheckpointHeader, mut blocks: BTreeMap<String, Payload>) -> Result<SlmModel> {
    let mut config = header.config.clone();
    config.n_layers = header.block_sources.len();
    // Skeleton with the right shapes; every value is overwritten below.
    let mut model = SlmModel::new(config, &Rng::new(0))?;
    for (b, &src) in model.base.blocks.iter_mut().zip(&header.block_sources) {
        b.source_index = src;
    }
    model.source_layers = header.source_layers;
    model.sparsity_level = header.sparsity_level;
    model.adapter = LoraAdapter::empty(header.adapter_scale);

    let mut masks = BTreeMap::new();
    let mut halves: BTreeMap<_, (Option<Matrix>, Option<Matrix>)> = BTreeMap::new();
    let mut adapter_masks = Vec::new();
    let names: Vec<String> = blocks.keys().cloned().collect();
    for name in names {
        let payload = blocks.remove(&name).expect("listed key");
        match payload {
            Payload::Tensor(m) => match name.parse::<ParamKey>()? {
                ParamKey::Lora(t, which) => {
                    let h = halves.entry(t).or_default();
                    match which {
                        AdapterMatrix::A => h.0 = Some(m),
                        AdapterMatrix::B => h.1 = Some(m),
                    }
                }
                key => {
                    let dst = model
                        .base
                        .param_mut(key)
                        .ok_or_else(|| Error::Parse(format!("block {name} does not fit the model")))?;
                    if dst.shape() != m.shape() {
                        return Err(Error::Parse(format!(
                            "block {name} is {:?}, model expects {:?}",
                            m.shape(),
                            dst.shape()
                        )));
                    }
                    *dst = m;
                }
            },
            Payload::Mask(mask) => {
                let base = name
                    .strip_suffix(MASK_SUFFIX)
                    .ok_or_else(|| Error::Parse(format!("mask block {name} lacks the {MASK_SUFFIX} suffix")))?;
                match base.parse::<ParamKey>()? {
                    ParamKey::Weight(i, p) => {
                        masks.insert((i, p), mask);
                    }
                    ParamKey::Lora(t, which) => adapter_masks.push((t, which, mask)),
                    _ => return Err(Error::Parse(format!("mask on unmaskable parameter {base}"))),
                }
            }
        }
    }

    for (t, (a, b)) in halves {
        let (Some(a), Some(b)) = (a, b) else {
            return Err(Error::Parse(format!(
                "adapter {} is missing a matrix",
                t.key(AdapterMatrix::A)
            )));
        };
        model.adapter.pairs.insert(
            t,
            LoraPair {
                a,
                b,
                mask_a: None,
                mask_b: None,
            },
        );
    }
    for (t, which, mask) in adapter_masks {
        let pair = model
            .adapter
            .pairs
            .get_mut(&t)
            .ok_or_else(|| Error::Parse(format!("mask for missing adapter {}", t.key(which))))?;
        if mask.shape() != pair.matrix(which).shape() {
            return Err(Error::Parse(format!("mask shape mismatch on {}", t.key(which))));
        }
        match which {
            AdapterMatrix::A => pair.mask_a = Some(mask),
            AdapterMatrix::B => pair.mask_b = Some(mask),
        }
    }
    for (&(i, p), mask) in &masks {
        let w = model
            .base
            .blocks
            .get(i)
            .ok_or_else(|| Error::Parse(format!("mask for missing block {i}")))?
            .weight(p);
        if w.shape() != mask.shape() {
            return Err(Error::Parse(format!("mask shape mismatch on block {i} {p}")));
        }
    }
    model.masks = masks;
    Ok(model)
}

pub fn save_checkpoint(model: &SlmModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SlmModel> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraTarget, Projection};
    use crate::pruning::{prune_model, PruneSpec, Strategy};

    fn sample_model() -> SlmModel {
        let m = SlmModel::new(ModelConfig::default(), &Rng::new(21)).unwrap();
        let mut m = prune_model(&m, &PruneSpec::unstructured(Strategy::Magnitude, 0.5), None).unwrap();
        let mut rng = Rng::new(22);
        for p in m.adapter.pairs.values_mut() {
            p.b = Matrix::random_normal(p.b.rows(), p.b.cols(), 0.1, &mut rng);
            let bits = (0..p.a.len()).map(|_| rng.bernoulli(0.5)).collect();
            p.mask_a = Some(SparseMask::from_bools(p.a.rows(), p.a.cols(), bits).unwrap());
        }
        m.adapter.apply_masks().unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample_model();
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let tokens = [5, 6, 7, 8];
        assert_eq!(back.logits(&tokens).unwrap(), m.logits(&tokens).unwrap());
    }

    #[test]
    fn layer_pruned_models_keep_their_sources() {
        let cfg = ModelConfig {
            n_layers: 4,
            ..ModelConfig::default()
        };
        let m = SlmModel::new(cfg, &Rng::new(3)).unwrap();
        let m = crate::pruning::layer_prune(&m, &[1, 3]).unwrap();
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back
            .adapter
            .get(&LoraTarget {
                layer: 3,
                proj: Projection::Q
            })
            .is_some());
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = checkpoint_to_bytes(&sample_model()).unwrap();
        for cut in [0, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Parse(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = checkpoint_to_bytes(&sample_model()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.bin")),
            Err(Error::Missing(_))
        ));
    }
}
