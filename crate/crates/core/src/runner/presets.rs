//! Named experiment configurations.
//!
//! Every preset starts from the default model, corpus and pretraining
//! settings, so presets sharing a seed (and layer count) share a base model.

use crate::error::{Error, Result};
use crate::federation::{AggregationConfig, FederationConfig, PartitionMode, PartitionSpec};
use crate::pruning::{PruneSpec, Strategy};

use super::config::{ExperimentConfig, Variant};

/// `(name, description)` of every preset.
pub const PRESETS: &[(&str, &str)] = &[
    ("iid", "four 75%-sparse clients on iid shards, eight rounds, heteagg"),
    (
        "fedit-iid",
        "four dense clients on iid shards, eight rounds, fedavg baseline",
    ),
    (
        "task",
        "eight 75%-sparse clients, one domain each with unequal shard sizes, heteagg",
    ),
    ("fedit-task", "eight dense clients on task shards, fedavg baseline"),
    (
        "hetero",
        "clients at 0/25/50/75% sparsity, all fine-tune, one aggregation round",
    ),
    (
        "ablation",
        "the hetero setup four times, each leaving one client out of aggregation",
    ),
    (
        "strategy",
        "the hetero setup under activation-norm and magnitude pruning",
    ),
    (
        "layer",
        "four-layer base: layer-dropped clients against activation-pruned ones",
    ),
];

const LEVELS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

fn activation(s: f64) -> PruneSpec {
    PruneSpec::unstructured(Strategy::ActivationNorm, s)
}

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        ..ExperimentConfig::default()
    }
}

fn one_shot() -> FederationConfig {
    FederationConfig {
        rounds: 1,
        participation_rate: 1.0,
        ..FederationConfig::default()
    }
}

fn task_partition() -> PartitionSpec {
    PartitionSpec {
        mode: PartitionMode::TaskDependent,
        size_weights: None,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut c = base(name);
    match name {
        "iid" => {
            c.clients = vec![activation(0.75); 4];
        }
        "fedit-iid" => {
            c.clients = vec![PruneSpec::dense(); 4];
            c.aggregation = AggregationConfig::fedavg();
        }
        "task" => {
            c.clients = vec![activation(0.75); 8];
            c.partition = task_partition();
        }
        "fedit-task" => {
            c.clients = vec![PruneSpec::dense(); 8];
            c.partition = task_partition();
            c.aggregation = AggregationConfig::fedavg();
        }
        "hetero" => {
            c.clients = LEVELS.iter().map(|&s| activation(s)).collect();
            c.federation = one_shot();
        }
        "ablation" => {
            c.clients = LEVELS.iter().map(|&s| activation(s)).collect();
            c.federation = one_shot();
            c.variants = (0..4)
                .map(|i| Variant {
                    label: format!("without_client{i}"),
                    exclude_clients: Some(vec![i]),
                    clients: None,
                })
                .collect();
        }
        "strategy" => {
            c.federation = one_shot();
            c.variants = [
                ("activation", Strategy::ActivationNorm),
                ("magnitude", Strategy::Magnitude),
            ]
            .into_iter()
            .map(|(label, strategy)| Variant {
                label: label.into(),
                exclude_clients: None,
                clients: Some(LEVELS.iter().map(|&s| PruneSpec::unstructured(strategy, s)).collect()),
            })
            .collect();
        }
        "layer" => {
            c.model.n_layers = 4;
            c.variants = vec![
                Variant {
                    label: "activation".into(),
                    exclude_clients: None,
                    clients: Some(vec![activation(0.0), activation(0.25), activation(0.5)]),
                },
                Variant {
                    label: "layer".into(),
                    exclude_clients: None,
                    clients: Some(vec![
                        activation(0.0),
                        PruneSpec::layers(vec![0, 1, 2]),
                        PruneSpec::layers(vec![0, 1]),
                    ]),
                },
            ];
        }
        _ => {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            return Err(Error::config(format!(
                "unknown preset {name:?}; available: {}",
                names.join(", ")
            )));
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.name, *name);
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c, "{name}");
        }
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_leaves_each_client_out_once() {
        let runs = preset("ablation").unwrap().runs();
        assert_eq!(runs.len(), 4);
        for (i, r) in runs.iter().enumerate() {
            assert_eq!(r.setup.excluded.iter().copied().collect::<Vec<_>>(), vec![i]);
            assert_eq!(r.label.as_deref(), Some(format!("without_client{i}").as_str()));
        }
    }
}
