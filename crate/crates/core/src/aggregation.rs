//! Masked heterogeneous aggregation of adapter matrices.
//!
//! [`heteagg`] averages every position only over the participants that hold
//! a weight there. A client's zeros are never written into the global
//! average and never overwritten on the way back, so sparse clients keep
//! their sparsity while the global adapter stays dense. [`fedavg`] is the
//! unmasked baseline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{masked_where, Matrix, Rng, SparseMask};

/// A parameter value with an optional keep-mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Matrix,
    pub mask: Option<SparseMask>,
}

/// Named matrices exchanged in one aggregation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl NamedParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, entry: ParamEntry) {
        self.entries.insert(key.into(), entry);
    }

    pub fn get(&self, key: &str) -> Option<&ParamEntry> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Fills in every key of `template` this set lacks with a zero value and
    /// an all-pruned mask, so the missing part contributes nothing.
    pub fn expanded_to(&self, template: &NamedParamSet) -> NamedParamSet {
        let mut out = self.clone();
        for (k, e) in template.iter() {
            if !out.entries.contains_key(k) {
                let (r, c) = e.value.shape();
                out.insert(
                    k.clone(),
                    ParamEntry {
                        value: Matrix::zeros(r, c),
                        mask: Some(SparseMask::zeros(r, c)),
                    },
                );
            }
        }
        out
    }

    /// Drops every key not present in `keep`.
    pub fn restricted_to<'a>(&self, keep: impl IntoIterator<Item = &'a String>) -> NamedParamSet {
        let mut out = NamedParamSet::new();
        for k in keep {
            if let Some(e) = self.entries.get(k) {
                out.insert(k.clone(), e.clone());
            }
        }
        out
    }

    fn check_compatible(&self, other: &NamedParamSet, who: &str) -> Result<()> {
        if self.entries.len() != other.entries.len() || !self.entries.keys().eq(other.entries.keys()) {
            return Err(Error::Shape(format!("{who} has a different parameter key set")));
        }
        for (k, e) in &self.entries {
            let o = &other.entries[k];
            if e.value.shape() != o.value.shape() {
                return Err(Error::Shape(format!(
                    "{who}: {k} is {:?}, expected {:?}",
                    o.value.shape(),
                    e.value.shape()
                )));
            }
            if let Some(m) = &o.mask {
                if m.shape() != o.value.shape() {
                    return Err(Error::Shape(format!("{who}: mask of {k} does not match its value")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroCountBehavior {
    /// Positions nobody contributed to keep the prior global value.
    #[default]
    RetainGlobal,
    /// Positions nobody contributed to become zero (`sum / max(count, 1)`).
    ZeroOut,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Use the mask attached to each entry; no mask means dense.
    #[default]
    ExplicitMask,
    /// Treat every nonzero value as present.
    RuntimeNonzero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggPolicy {
    /// The global value participates in every position's mean.
    pub include_global: bool,
    pub zero_count_behavior: ZeroCountBehavior,
    pub mask_source: MaskSource,
}

impl Default for AggPolicy {
    fn default() -> Self {
        Self {
            include_global: true,
            zero_count_behavior: ZeroCountBehavior::RetainGlobal,
            mask_source: MaskSource::ExplicitMask,
        }
    }
}

impl AggPolicy {
    fn contribution_mask(&self, entry: &ParamEntry) -> SparseMask {
        match self.mask_source {
            MaskSource::ExplicitMask => entry
                .mask
                .clone()
                .unwrap_or_else(|| SparseMask::ones(entry.value.rows(), entry.value.cols())),
            MaskSource::RuntimeNonzero => SparseMask::from_nonzero(&entry.value),
        }
    }
}

/// Per-key running sums (in `f64`) and contributor counts.
#[derive(Clone, Debug, Default)]
pub struct AggregationAccumulator {
    slots: BTreeMap<String, (usize, usize, Vec<f64>, Vec<u32>)>,
}

impl AggregationAccumulator {
    /// Empty sums; with `include_global` each slot starts at the global value
    /// with count 1.
    pub fn new(global: &NamedParamSet, include_global: bool) -> Self {
        let slots = global
            .iter()
            .map(|(k, e)| {
                let (r, c) = e.value.shape();
                let (sums, counts) = if include_global {
                    (e.value.data().iter().map(|&v| v as f64).collect(), vec![1; r * c])
                } else {
                    (vec![0.0; r * c], vec![0; r * c])
                };
                (k.clone(), (r, c, sums, counts))
            })
            .collect();
        Self { slots }
    }

    pub fn add(&mut self, key: &str, value: &Matrix, mask: &SparseMask) -> Result<()> {
        let (_, _, sums, counts) = self
            .slots
            .get_mut(key)
            .ok_or_else(|| Error::Shape(format!("unknown key {key}")))?;
        for (((s, c), &v), &k) in sums
            .iter_mut()
            .zip(counts.iter_mut())
            .zip(value.data())
            .zip(mask.bits())
        {
            if k {
                *s += v as f64;
                *c += 1;
            }
        }
        Ok(())
    }

    pub fn counts(&self, key: &str) -> Option<&[u32]> {
        self.slots.get(key).map(|s| s.3.as_slice())
    }

    /// Per-position means; `fallback` supplies positions with count 0.
    fn average(&self, key: &str, fallback: &Matrix, behavior: ZeroCountBehavior) -> Result<Matrix> {
        let (r, c, sums, counts) = &self.slots[key];
        let data = sums
            .iter()
            .zip(counts)
            .zip(fallback.data())
            .map(|((&s, &n), &g)| match (n, behavior) {
                (0, ZeroCountBehavior::RetainGlobal) => g,
                (0, ZeroCountBehavior::ZeroOut) => 0.0,
                _ => (s / n as f64) as f32,
            })
            .collect();
        Matrix::from_vec(*r, *c, data)
    }
}

/// Masked heterogeneous aggregation.
///
/// For every position the new global value is the mean over the global (when
/// `include_global`) and every client whose mask keeps that position.
/// Positions with no contributor follow `zero_count_behavior`. Each client is
/// then written back as `where(mask, average, prior)`, so its pruned
/// positions are untouched. Clients are accumulated in slice order.
pub fn heteagg(
    global: &NamedParamSet,
    clients: &[NamedParamSet],
    policy: &AggPolicy,
) -> Result<(NamedParamSet, Vec<NamedParamSet>)> {
    if clients.is_empty() {
        return Err(Error::Input("heteagg needs at least one client".into()));
    }
    for (i, c) in clients.iter().enumerate() {
        global.check_compatible(c, &format!("client {i}"))?;
    }

    let mut acc = AggregationAccumulator::new(global, policy.include_global);
    let client_masks: Vec<BTreeMap<&String, SparseMask>> = clients
        .iter()
        .map(|c| c.iter().map(|(k, e)| (k, policy.contribution_mask(e))).collect())
        .collect();
    for (client, masks) in clients.iter().zip(&client_masks) {
        for (k, e) in client.iter() {
            acc.add(k, &e.value, &masks[k])?;
        }
    }

    let mut updated_global = NamedParamSet::new();
    for (k, e) in global.iter() {
        let avg = acc.average(k, &e.value, policy.zero_count_behavior)?;
        updated_global.insert(
            k.clone(),
            ParamEntry {
                value: avg,
                mask: e.mask.clone(),
            },
        );
    }

    let updated_clients = clients
        .iter()
        .zip(&client_masks)
        .map(|(client, masks)| {
            let mut out = NamedParamSet::new();
            for (k, e) in client.iter() {
                let avg = &updated_global.entries[k].value;
                out.insert(
                    k.clone(),
                    ParamEntry {
                        value: masked_where(&masks[k], avg, &e.value)?,
                        mask: e.mask.clone(),
                    },
                );
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((updated_global, updated_clients))
}

/// Writes a global update into a client that did not take part:
/// `where(mask, global, prior)` for every key the client holds.
pub fn apply_global_update(
    global: &NamedParamSet,
    client: &NamedParamSet,
    policy: &AggPolicy,
) -> Result<NamedParamSet> {
    let mut out = NamedParamSet::new();
    for (k, e) in client.iter() {
        let g = global
            .get(k)
            .ok_or_else(|| Error::Shape(format!("global update lacks key {k}")))?;
        let mask = policy.contribution_mask(e);
        out.insert(
            k.clone(),
            ParamEntry {
                value: masked_where(&mask, &g.value, &e.value)?,
                mask: e.mask.clone(),
            },
        );
    }
    Ok(out)
}

/// Plain elementwise mean over clients; masks are ignored.
pub fn fedavg(clients: &[NamedParamSet]) -> Result<NamedParamSet> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Input("fedavg needs at least one client".into()))?;
    for (i, c) in clients.iter().enumerate().skip(1) {
        first.check_compatible(c, &format!("client {i}"))?;
    }
    let n = clients.len() as f64;
    let mut out = NamedParamSet::new();
    for (k, e) in first.iter() {
        let mut sums = vec![0.0f64; e.value.len()];
        for c in clients {
            for (s, &v) in sums.iter_mut().zip(c.entries[k].value.data()) {
                *s += v as f64;
            }
        }
        let value = Matrix::from_vec(
            e.value.rows(),
            e.value.cols(),
            sums.into_iter().map(|s| (s / n) as f32).collect(),
        )?;
        out.insert(k.clone(), ParamEntry { value, mask: None });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMaskPolicy {
    /// Independent Bernoulli(1 - sparsity) keep-masks on A and B.
    #[default]
    EntrywiseRandom,
    /// A column j pruned iff base column j is fully pruned; B row i pruned
    /// iff base row i is fully pruned.
    StructuralProjection,
    /// Dense adapters.
    None,
}

/// Derives keep-masks for an adapter pair `A: rank x d_in`, `B: d_out x rank`
/// attached to a base weight with pruning mask `model_mask` (`d_out x d_in`).
pub fn derive_adapter_masks(
    model_mask: &SparseMask,
    rank: usize,
    policy: AdapterMaskPolicy,
    sparsity: f64,
    rng: &mut Rng,
) -> Result<(SparseMask, SparseMask)> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Input(format!("sparsity {sparsity} outside [0, 1]")));
    }
    let (d_out, d_in) = model_mask.shape();
    match policy {
        AdapterMaskPolicy::None => Ok((SparseMask::ones(rank, d_in), SparseMask::ones(d_out, rank))),
        AdapterMaskPolicy::EntrywiseRandom => {
            let keep = 1.0 - sparsity;
            let a = (0..rank * d_in).map(|_| rng.bernoulli(keep)).collect();
            let b = (0..d_out * rank).map(|_| rng.bernoulli(keep)).collect();
            Ok((
                SparseMask::from_bools(rank, d_in, a)?,
                SparseMask::from_bools(d_out, rank, b)?,
            ))
        }
        AdapterMaskPolicy::StructuralProjection => {
            let col_alive: Vec<bool> = (0..d_in).map(|j| (0..d_out).any(|i| model_mask.get(i, j))).collect();
            let row_alive: Vec<bool> = (0..d_out).map(|i| (0..d_in).any(|j| model_mask.get(i, j))).collect();
            let a = (0..rank).flat_map(|_| col_alive.iter().copied()).collect();
            let b = row_alive
                .iter()
                .flat_map(|&alive| std::iter::repeat_n(alive, rank))
                .collect();
            Ok((
                SparseMask::from_bools(rank, d_in, a)?,
                SparseMask::from_bools(d_out, rank, b)?,
            ))
        }
    }
}

static PRODUCT_PATH_CALLS: AtomicUsize = AtomicUsize::new(0);

/// How many times [`mean_product`] has run in this process.
pub fn product_path_calls() -> usize {
    PRODUCT_PATH_CALLS.load(Ordering::SeqCst)
}

/// Noise-free reference: the mean of the effective updates `B_i·A_i`.
/// Diagnostic only; federation aggregates A and B separately.
pub fn mean_product(pairs: &[(Matrix, Matrix)]) -> Result<Matrix> {
    PRODUCT_PATH_CALLS.fetch_add(1, Ordering::SeqCst);
    let (a0, b0) = pairs
        .first()
        .ok_or_else(|| Error::Input("need at least one adapter pair".into()))?;
    let mut acc = vec![0.0f64; b0.rows() * a0.cols()];
    for (a, b) in pairs {
        let prod = b.matmul(a)?;
        if prod.shape() != (b0.rows(), a0.cols()) {
            return Err(Error::Shape("adapter pairs differ in shape".into()));
        }
        for (s, &v) in acc.iter_mut().zip(prod.data()) {
            *s += v as f64;
        }
    }
    let n = pairs.len() as f64;
    Matrix::from_vec(b0.rows(), a0.cols(), acc.into_iter().map(|s| (s / n) as f32).collect())
}

fn mean_of(ms: impl Iterator<Item = Matrix>, n: usize) -> Result<Matrix> {
    let mut it = ms;
    let first = it.next().ok_or_else(|| Error::Input("nothing to average".into()))?;
    let mut acc: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
    for m in it {
        if m.shape() != first.shape() {
            return Err(Error::Shape("adapter pairs differ in shape".into()));
        }
        for (s, &v) in acc.iter_mut().zip(m.data()) {
            *s += v as f64;
        }
    }
    Matrix::from_vec(
        first.rows(),
        first.cols(),
        acc.into_iter().map(|s| (s / n as f64) as f32).collect(),
    )
}

/// `‖mean(B)·mean(A) − mean(B·A)‖_F` over `(A, B)` pairs: the error from
/// averaging the low-rank factors separately instead of their product.
pub fn noise_gap(pairs: &[(Matrix, Matrix)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("noise_gap needs at least one client".into()));
    }
    let mean_a = mean_of(pairs.iter().map(|(a, _)| a.clone()), pairs.len())?;
    let mean_b = mean_of(pairs.iter().map(|(_, b)| b.clone()), pairs.len())?;
    let separate = mean_b.matmul(&mean_a)?;
    let joint = mean_product(pairs)?;
    let mut diff = 0.0f64;
    for (x, y) in separate.data().iter().zip(joint.data()) {
        let d = *x as f64 - *y as f64;
        diff += d * d;
    }
    Ok(diff.sqrt())
}
