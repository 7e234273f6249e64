//! Deriving sparse client models from a trained base.
//!
//! Unstructured strategies score every projection weight and prune the
//! lowest scores within each comparison group; layer pruning drops whole
//! blocks. Embeddings, norms and the output head are never touched.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::math::{Matrix, SparseMask, Tape};
use crate::model::{Bound, Projection, SlmModel, Trainable};

/// Sequences per calibration batch.
pub const CALIBRATION_BATCH_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Prune the smallest `|W_ij|`.
    Magnitude,
    /// Prune the smallest `|W_ij|·‖X_j‖₂`, using calibration activations.
    ActivationNorm,
    /// Keep only the listed blocks.
    Layer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    /// Each output row competes separately.
    #[default]
    PerRow,
    /// The whole matrix competes at once.
    PerMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub group: ComparisonGroup,
    #[serde(default = "default_calibration_batches")]
    pub calibration_batches: usize,
}

fn default_calibration_batches() -> usize {
    8
}

impl PruneSpec {
    pub fn dense() -> Self {
        Self::unstructured(Strategy::ActivationNorm, 0.0)
    }

    pub fn unstructured(strategy: Strategy, sparsity: f64) -> Self {
        Self {
            strategy,
            sparsity: Some(sparsity),
            keep_layers: None,
            group: ComparisonGroup::PerRow,
            calibration_batches: default_calibration_batches(),
        }
    }

    pub fn layers(keep: Vec<usize>) -> Self {
        Self {
            strategy: Strategy::Layer,
            sparsity: None,
            keep_layers: Some(keep),
            group: ComparisonGroup::PerRow,
            calibration_batches: default_calibration_batches(),
        }
    }

    /// Whether pruning needs calibration activations.
    pub fn needs_calibration(&self) -> bool {
        self.strategy == Strategy::ActivationNorm && self.sparsity.is_some_and(|s| s > 0.0)
    }

    /// Appends every problem to `errors`, each prefixed with `at`.
    pub fn validate(&self, at: &str, n_layers: usize, errors: &mut Vec<String>) {
        match self.strategy {
            Strategy::Magnitude | Strategy::ActivationNorm => {
                if self.keep_layers.is_some() {
                    errors.push(format!("{at}: keep_layers only applies to the layer strategy"));
                }
                match self.sparsity {
                    None => errors.push(format!("{at}: sparsity is required")),
                    Some(s) if !(0.0..=1.0).contains(&s) => {
                        errors.push(format!("{at}: sparsity {s} must lie in [0, 1]"))
                    }
                    Some(_) => {}
                }
                if self.calibration_batches == 0 {
                    errors.push(format!("{at}: calibration_batches must be at least 1"));
                }
            }
            Strategy::Layer => {
                if self.sparsity.is_some() {
                    errors.push(format!("{at}: the layer strategy takes keep_layers, not sparsity"));
                }
                match &self.keep_layers {
                    None => errors.push(format!("{at}: keep_layers is required")),
                    Some(k) => {
                        if let Err(e) = check_keep_layers(k, n_layers) {
                            errors.push(format!("{at}: {e}"));
                        }
                    }
                }
            }
        }
    }
}

/// Number of pruned entries in a group of `n` at sparsity `s`.
pub fn prune_count(n: usize, s: f64) -> usize {
    ((s * n as f64) + 1e-9).floor().min(n as f64) as usize
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Input(format!("sparsity {s} outside [0, 1]")));
    }
    Ok(())
}

/// Keep-mask from per-entry scores: the lowest `⌊s·N⌋` of each group are
/// pruned, ties going to the lower flat index.
pub fn mask_from_scores(
    rows: usize,
    cols: usize,
    scores: &[f64],
    s: f64,
    group: ComparisonGroup,
) -> Result<SparseMask> {
    check_sparsity(s)?;
    if scores.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} scores for a {rows}x{cols} matrix",
            scores.len()
        )));
    }
    let mut keep = vec![true; rows * cols];
    let groups: Vec<std::ops::Range<usize>> = match group {
        ComparisonGroup::PerRow => (0..rows).map(|r| r * cols..(r + 1) * cols).collect(),
        #[allow(clippy::single_range_in_vec_init)]
        ComparisonGroup::PerMatrix => vec![0..rows * cols],
    };
    for g in groups {
        let mut order: Vec<usize> = g.clone().collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        for &i in &order[..prune_count(g.len(), s)] {
            keep[i] = false;
        }
    }
    SparseMask::from_bools(rows, cols, keep)
}

pub fn magnitude_prune(w: &Matrix, s: f64, group: ComparisonGroup) -> Result<SparseMask> {
    let scores: Vec<f64> = w.data().iter().map(|v| v.abs() as f64).collect();
    mask_from_scores(w.rows(), w.cols(), &scores, s, group)
}

/// Scores `|W_ij|·‖X_j‖₂` with `norms` indexed by input column.
pub fn activation_prune(w: &Matrix, norms: &[f64], s: f64, group: ComparisonGroup) -> Result<SparseMask> {
    if norms.len() != w.cols() {
        return Err(Error::config(format!(
            "calibration covers {} input columns, weight has {}",
            norms.len(),
            w.cols()
        )));
    }
    let cols = w.cols();
    let scores: Vec<f64> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.abs() as f64 * norms[i % cols])
        .collect();
    mask_from_scores(w.rows(), cols, &scores, s, group)
}

/// Input activation column norms `‖X_j‖₂` for every projection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationStats {
    /// Keyed by (block position, projection).
    pub norms: BTreeMap<(usize, Projection), Vec<f64>>,
    pub sequences: usize,
}

impl CalibrationStats {
    pub fn get(&self, block: usize, p: Projection) -> Result<&[f64]> {
        self.norms
            .get(&(block, p))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("no calibration statistics for block {block} {p}")))
    }
}

/// Column L2 norms over every row of every input.
pub fn column_norms<'a>(inputs: impl IntoIterator<Item = &'a Matrix>) -> Result<Vec<f64>> {
    let mut sq: Option<Vec<f64>> = None;
    for x in inputs {
        let acc = sq.get_or_insert_with(|| vec![0.0; x.cols()]);
        if acc.len() != x.cols() {
            return Err(Error::Shape("calibration inputs differ in width".into()));
        }
        for r in 0..x.rows() {
            for (a, &v) in acc.iter_mut().zip(x.row(r)) {
                *a += v as f64 * v as f64;
            }
        }
    }
    let sq = sq.ok_or_else(|| Error::Input("empty calibration sample".into()))?;
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// Runs the model over `sample` and records the column norms of the input
/// to every projection across all token positions.
pub fn collect_calibration(model: &SlmModel, sample: &[Example]) -> Result<CalibrationStats> {
    if sample.is_empty() {
        return Err(Error::Input("empty calibration sample".into()));
    }
    let per_sequence: Vec<Vec<((usize, Projection), Matrix)>> = sample
        .par_iter()
        .map(|e| {
            let mut tape = Tape::<f32>::new();
            let bound = Bound::bind(model, &mut tape, Trainable::Nothing);
            let fwd = model.forward_graph(&mut tape, &bound, e.inputs())?;
            Ok(fwd
                .proj_inputs
                .iter()
                .map(|(k, v)| (*k, tape.value(*v).clone()))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut grouped: BTreeMap<(usize, Projection), Vec<&Matrix>> = BTreeMap::new();
    for seq in &per_sequence {
        for (k, m) in seq {
            grouped.entry(*k).or_default().push(m);
        }
    }
    let norms = grouped
        .into_iter()
        .map(|(k, ms)| Ok((k, column_norms(ms)?)))
        .collect::<Result<_>>()?;
    Ok(CalibrationStats {
        norms,
        sequences: sample.len(),
    })
}

fn check_keep_layers(keep: &[usize], n_layers: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::config("keep_layers must not be empty"));
    }
    if !keep.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config("keep_layers must be strictly increasing"));
    }
    if let Some(&bad) = keep.iter().find(|&&i| i >= n_layers) {
        return Err(Error::config(format!(
            "keep_layers entry {bad} is out of range for {n_layers} layers"
        )));
    }
    Ok(())
}

/// Keeps only the listed blocks (by current position, in order). Embeddings,
/// head and the adapters of kept layers carry over; sparsity is reported as
/// the dropped fraction of the source model's layers.
pub fn layer_prune(model: &SlmModel, keep: &[usize]) -> Result<SlmModel> {
    check_keep_layers(keep, model.base.blocks.len())?;
    let mut out = model.clone();
    out.base.blocks = keep.iter().map(|&i| model.base.blocks[i].clone()).collect();
    out.masks = model
        .masks
        .iter()
        .filter_map(|(&(i, p), m)| keep.iter().position(|&k| k == i).map(|pos| ((pos, p), m.clone())))
        .collect();
    let kept_sources: Vec<usize> = out.source_layer_indices();
    out.adapter.pairs.retain(|t, _| kept_sources.contains(&t.layer));
    out.config.n_layers = keep.len();
    out.sparsity_level = 1.0 - kept_sources.len() as f64 / model.source_layers as f64;
    Ok(out)
}

/// Applies `spec` to a copy of `model`. Activation pruning with nonzero
/// sparsity needs `calibration`.
pub fn prune_model(model: &SlmModel, spec: &PruneSpec, calibration: Option<&CalibrationStats>) -> Result<SlmModel> {
    let mut errors = Vec::new();
    spec.validate("prune", model.base.blocks.len(), &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    if spec.strategy == Strategy::Layer {
        return layer_prune(model, spec.keep_layers.as_deref().unwrap_or_default());
    }
    let s = spec.sparsity.unwrap_or(0.0);
    let mut out = model.clone();
    if s == 0.0 {
        out.masks.clear();
        out.sparsity_level = 0.0;
        return Ok(out);
    }
    let stats = match spec.strategy {
        Strategy::ActivationNorm => {
            Some(calibration.ok_or_else(|| Error::config("activation pruning requires calibration statistics"))?)
        }
        _ => None,
    };
    let mut masks = BTreeMap::new();
    for (i, block) in model.base.blocks.iter().enumerate() {
        for p in Projection::ALL {
            let w = block.weight(p);
            let mask = match stats {
                Some(st) => activation_prune(w, st.get(i, p)?, s, spec.group)?,
                None => magnitude_prune(w, s, spec.group)?,
            };
            masks.insert((i, p), mask);
        }
    }
    out.apply_pruning(masks)?;
    Ok(out)
}
