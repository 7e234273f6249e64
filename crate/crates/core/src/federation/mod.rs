//! Federated fine-tuning of heterogeneous sparse clients.
//!
//! Each round a cyclic subset of clients fine-tunes its adapter for one
//! local epoch; the adapters are aggregated with the global adapter and the
//! result is pushed back to every client and to the dense global model.

mod partition;
mod pretrain;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    apply_global_update, derive_adapter_masks, fedavg, heteagg, AdapterMaskPolicy, AggPolicy, MaskSource,
    NamedParamSet, ZeroCountBehavior,
};
use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::evalio::{evaluate, EvalSuite, MetricKind, MetricsRecord, Stage};
use crate::math::{Rng, SparseMask};
use crate::model::{train_step, Adam, AdamConfig, LoraAdapter, SlmModel, Trainable};
use crate::pruning::{collect_calibration, prune_model, CalibrationStats, PruneSpec, Strategy, CALIBRATION_BATCH_SIZE};

pub use partition::{partition_by_task, partition_iid, PartitionMode, PartitionSpec, DEFAULT_TASK_WEIGHTS};
pub use pretrain::{pretrain, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation_rate: f64,
    pub batch_size: usize,
    pub lr: f32,
    pub local_epochs: usize,
    pub adapter_mask_policy: AdapterMaskPolicy,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 8,
            participation_rate: 0.1,
            batch_size: 8,
            lr: 1e-2,
            local_epochs: 1,
            adapter_mask_policy: AdapterMaskPolicy::EntrywiseRandom,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.rounds == 0 {
            errors.push("federation.rounds must be at least 1".into());
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            errors.push(format!(
                "federation.participation_rate must lie in (0, 1], got {}",
                self.participation_rate
            ));
        }
        if self.batch_size == 0 {
            errors.push("federation.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("federation.lr must be positive, got {}", self.lr));
        }
        if self.local_epochs == 0 {
            errors.push("federation.local_epochs must be at least 1".into());
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Masked per-position averaging.
    #[default]
    Heteagg,
    /// Plain mean over participating clients.
    Fedavg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub algorithm: Algorithm,
    pub include_global: bool,
    pub zero_count_behavior: ZeroCountBehavior,
    pub mask_source: MaskSource,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self::heteagg()
    }
}

impl AggregationConfig {
    pub fn heteagg() -> Self {
        Self::from_policy(Algorithm::Heteagg, AggPolicy::default())
    }

    pub fn fedavg() -> Self {
        Self::from_policy(Algorithm::Fedavg, AggPolicy::default())
    }

    pub fn from_policy(algorithm: Algorithm, p: AggPolicy) -> Self {
        Self {
            algorithm,
            include_global: p.include_global,
            zero_count_behavior: p.zero_count_behavior,
            mask_source: p.mask_source,
        }
    }

    pub fn policy(&self) -> AggPolicy {
        AggPolicy {
            include_global: self.include_global,
            zero_count_behavior: self.zero_count_behavior,
            mask_source: self.mask_source,
        }
    }
}

/// Clients taking part in round `round`: `m = max(1, ⌊rate·n⌋)` consecutive
/// ids starting at `round·m`, wrapping around, returned in ascending order.
pub fn select_clients(round: usize, n_clients: usize, participation_rate: f64) -> Result<Vec<usize>> {
    if n_clients == 0 {
        return Err(Error::Input("no clients to select from".into()));
    }
    if !(participation_rate > 0.0 && participation_rate <= 1.0) {
        return Err(Error::Input(format!(
            "participation rate {participation_rate} outside (0, 1]"
        )));
    }
    let m = ((participation_rate * n_clients as f64 + 1e-9).floor() as usize).clamp(1, n_clients);
    let mut ids: Vec<usize> = (0..m).map(|j| (round * m + j) % n_clients).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: usize,
    pub selected: Vec<usize>,
    pub total_rounds: usize,
}

impl RoundPlan {
    pub fn new(round: usize, total_rounds: usize, n_clients: usize, rate: f64) -> Result<Self> {
        if round >= total_rounds {
            return Err(Error::Input(format!(
                "round {round} is past the last round {total_rounds}"
            )));
        }
        Ok(Self {
            round,
            selected: select_clients(round, n_clients, rate)?,
            total_rounds,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub prune: PruneSpec,
    /// Realized sparsity of the pruned model.
    pub sparsity_level: f64,
    pub model: SlmModel,
    pub shard: Vec<Example>,
    pub history: Vec<MetricsRecord>,
}

impl ClientState {
    pub fn subject(&self) -> String {
        format!("client{}", self.id)
    }

    /// Pruning masks and adapter masks are all honored.
    pub fn sparsity_intact(&self) -> bool {
        self.model.base_masks_respected() && self.model.adapter.masks_respected()
    }

    /// One local fine-tuning session with a fresh optimizer. Returns the mean
    /// pre-update loss over its steps.
    pub fn fine_tune(&mut self, cfg: &FederationConfig, rng: &Rng) -> Result<f64> {
        let mut opt = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let mut total = 0.0;
        let mut steps = 0usize;
        for epoch in 0..cfg.local_epochs {
            let mut order: Vec<usize> = (0..self.shard.len()).collect();
            rng.fork(epoch as u64).shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Example> = chunk.iter().map(|&i| self.shard[i].clone()).collect();
                let loss = train_step(&mut self.model, &batch, &mut opt, Trainable::Adapter)
                    .map_err(|e| Error::Numeric(format!("{} diverged during local training: {e}", self.subject())))?;
                total += loss as f64;
                steps += 1;
            }
        }
        Ok(total / steps.max(1) as f64)
    }
}

/// Everything needed to build the federation from a trained base.
#[derive(Clone, Debug)]
pub struct FederationSetup {
    pub clients: Vec<PruneSpec>,
    pub partition: PartitionSpec,
    pub federation: FederationConfig,
    pub aggregation: AggregationConfig,
    /// Clients that train but whose adapters are left out of aggregation.
    pub excluded: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Mean local training loss of each selected client.
    pub train_loss: BTreeMap<usize, f64>,
    pub records: Vec<MetricsRecord>,
}

/// The global model plus all clients.
#[derive(Clone, Debug)]
pub struct Federation {
    /// Dense base with the global adapter.
    pub global: SlmModel,
    pub clients: Vec<ClientState>,
    pub setup: FederationSetup,
    rng: Rng,
}

/// Prunes one model per spec from `base`. Specs asking for the same number
/// of calibration batches share one calibration pass.
pub fn prune_clients(base: &SlmModel, corpus: &Corpus, specs: &[PruneSpec]) -> Result<Vec<SlmModel>> {
    let mut cache: BTreeMap<usize, CalibrationStats> = BTreeMap::new();
    specs
        .iter()
        .map(|spec| {
            if !spec.needs_calibration() {
                return prune_model(base, spec, None);
            }
            let b = spec.calibration_batches;
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(b) {
                e.insert(collect_calibration(
                    base,
                    &corpus.calibration_sample(b * CALIBRATION_BATCH_SIZE),
                )?);
            }
            prune_model(base, spec, cache.get(&b))
        })
        .collect()
}

impl Federation {
    /// Prunes one client per spec from `base`, derives adapter masks, deals
    /// the fine-tuning split into shards and initializes the shared adapter.
    pub fn new(base: &SlmModel, corpus: &Corpus, setup: FederationSetup, rng: &Rng) -> Result<Self> {
        let n = setup.clients.len();
        if n == 0 {
            return Err(Error::config("at least one client is required"));
        }
        let shards = setup
            .partition
            .split(&corpus.finetune, n, &rng.fork_named("partition"))?;

        let mut global = base.clone();
        global.adapter = LoraAdapter::init(
            &base.config,
            base.source_layer_indices(),
            &rng.fork_named("global_adapter"),
        );

        let pruned = prune_clients(base, corpus, &setup.clients)?;
        let mut clients = Vec::with_capacity(n);
        for (id, ((spec, shard), mut model)) in setup.clients.iter().zip(shards).zip(pruned).enumerate() {
            model.adapter = Self::client_adapter(
                &global,
                &model,
                spec,
                &setup.federation,
                &rng.fork_named(&format!("client{id}.adapter_masks")),
            )?;
            if shard.is_empty() {
                return Err(Error::Partition(format!("client {id} received no data")));
            }
            clients.push(ClientState {
                id,
                prune: spec.clone(),
                sparsity_level: model.sparsity_level,
                model,
                shard,
                history: Vec::new(),
            });
        }
        Ok(Self {
            global,
            clients,
            setup,
            rng: rng.fork_named("rounds"),
        })
    }

    /// The global adapter restricted to the client's layers, masked per the
    /// mask policy. Layer-pruned clients keep dense adapters.
    fn client_adapter(
        global: &SlmModel,
        client: &SlmModel,
        spec: &PruneSpec,
        cfg: &FederationConfig,
        rng: &Rng,
    ) -> Result<LoraAdapter> {
        let sources = client.source_layer_indices();
        let mut adapter = global.adapter.clone();
        adapter.pairs.retain(|t, _| sources.contains(&t.layer));
        let policy = if spec.strategy == Strategy::Layer {
            AdapterMaskPolicy::None
        } else {
            cfg.adapter_mask_policy
        };
        let sparsity = spec.sparsity.unwrap_or(0.0);
        let mut r = rng.clone();
        for (t, pair) in adapter.pairs.iter_mut() {
            let pos = sources.iter().position(|&s| s == t.layer).expect("retained layer");
            let (rows, cols) = t.proj.shape(&client.config);
            let base_mask = client
                .masks
                .get(&(pos, t.proj))
                .cloned()
                .unwrap_or_else(|| SparseMask::ones(rows, cols));
            if policy == AdapterMaskPolicy::None {
                continue;
            }
            let (ma, mb) = derive_adapter_masks(&base_mask, client.config.lora_rank, policy, sparsity, &mut r)?;
            pair.mask_a = Some(ma);
            pair.mask_b = Some(mb);
        }
        adapter.apply_masks()?;
        Ok(adapter)
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Evaluation records for the global model and every client.
    pub fn evaluate_all(&mut self, round: usize, stage: Stage, suite: &EvalSuite) -> Result<Vec<MetricsRecord>> {
        let mut out = evaluate(&self.global, suite)?.records(round, "global", stage);
        for c in &mut self.clients {
            let recs = evaluate(&c.model, suite)?.records(round, &c.subject(), stage);
            c.history.extend(recs.iter().cloned());
            out.extend(recs);
        }
        Ok(out)
    }

    /// Fine-tunes the selected clients, aggregates the participating ones with
    /// the global adapter and writes the new global adapter back into every
    /// client wherever its mask keeps a weight. Metrics are recorded as round
    /// `plan.round + 1` when a suite is given.
    pub fn run_round(&mut self, plan: &RoundPlan, suite: Option<&EvalSuite>) -> Result<RoundReport> {
        let n = self.n_clients();
        if let Some(&bad) = plan.selected.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("round plan selects unknown client {bad}")));
        }
        let round = plan.round + 1;
        let mut report = RoundReport {
            round,
            selected: plan.selected.clone(),
            ..RoundReport::default()
        };

        let cfg = self.setup.federation.clone();
        for &id in &plan.selected {
            let rng = self.rng.fork_named(&format!("client{id}.round{}", plan.round));
            let loss = self.clients[id].fine_tune(&cfg, &rng)?;
            report.train_loss.insert(id, loss);
            if let Some(s) = suite {
                let c = &mut self.clients[id];
                let recs = evaluate(&c.model, s)?.records(round, &c.subject(), Stage::FineTuned);
                c.history.extend(recs.iter().cloned());
                report.records.extend(recs);
            }
        }

        let global_set = self.global.adapter.to_param_set();
        let participants: Vec<NamedParamSet> = plan
            .selected
            .iter()
            .filter(|id| !self.setup.excluded.contains(id))
            .map(|&id| self.clients[id].model.adapter.to_param_set().expanded_to(&global_set))
            .collect();
        let policy = self.setup.aggregation.policy();
        let new_global = if participants.is_empty() {
            global_set
        } else {
            match self.setup.aggregation.algorithm {
                Algorithm::Heteagg => heteagg(&global_set, &participants, &policy)?.0,
                Algorithm::Fedavg => fedavg(&participants)?,
            }
        };

        self.global.adapter.load_values(&new_global)?;
        for c in &mut self.clients {
            let updated = apply_global_update(&new_global, &c.model.adapter.to_param_set(), &policy)?;
            c.model.adapter.load_values(&updated)?;
            if !c.sparsity_intact() {
                return Err(Error::Numeric(format!("{} lost its sparsity pattern", c.subject())));
            }
        }

        if let Some(s) = suite {
            report
                .records
                .extend(self.evaluate_all(round, Stage::GloballyUpdated, s)?);
        }
        Ok(report)
    }
}

/// Outcome of a full federated run.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub federation: Federation,
    /// Client models right after pruning, before any fine-tuning.
    pub pruned: Vec<SlmModel>,
    pub metrics: Vec<MetricsRecord>,
    pub reports: Vec<RoundReport>,
}

impl ExperimentOutcome {
    /// Average held-out loss of `subject` at `round` and `stage`.
    pub fn average_loss(&self, round: usize, subject: &str, stage: Stage) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.round == round && r.subject == subject && r.stage == stage && r.metric == MetricKind::Loss)
            .map(|r| r.average)
    }
}

/// Round 0 evaluation of the freshly pruned clients and the global model,
/// then every configured round. `observer` sees the federation after each
/// round and may abort the run by returning an error.
pub fn run_experiment(
    base: &SlmModel,
    corpus: &Corpus,
    setup: FederationSetup,
    rng: &Rng,
    observer: &mut dyn FnMut(&Federation, &RoundReport) -> Result<()>,
) -> Result<ExperimentOutcome> {
    let suite = EvalSuite::new(&corpus.heldout)?;
    let mut fed = Federation::new(base, corpus, setup, rng)?;
    let pruned = fed.clients.iter().map(|c| c.model.clone()).collect();
    let mut metrics = fed.evaluate_all(0, Stage::Pruned, &suite)?;
    let cfg = fed.setup.federation.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for k in 0..cfg.rounds {
        let plan = RoundPlan::new(k, cfg.rounds, fed.n_clients(), cfg.participation_rate)?;
        let report = fed.run_round(&plan, Some(&suite))?;
        observer(&fed, &report)?;
        metrics.extend(report.records.iter().cloned());
        reports.push(report);
    }
    Ok(ExperimentOutcome {
        federation: fed,
        pruned,
        metrics,
        reports,
    })
}
