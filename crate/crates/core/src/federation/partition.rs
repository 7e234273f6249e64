use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, DomainSplit, Example};
use crate::error::{Error, Result};
use crate::math::Rng;

/// Relative shard sizes for task-dependent partitions; the largest shard is
/// five times the smallest.
pub const DEFAULT_TASK_WEIGHTS: [f64; 8] = [1.0, 0.2, 0.6, 0.4, 0.8, 0.3, 1.0, 0.5];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every shard covers every domain in the corpus ratios.
    #[default]
    Iid,
    /// Shard `i` holds only domain `i`.
    TaskDependent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// Task-dependent only: per-shard size relative to the largest weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_weights: Option<Vec<f64>>,
}

impl PartitionSpec {
    pub fn validate(&self, n_clients: usize, errors: &mut Vec<String>) {
        match self.mode {
            PartitionMode::Iid => {
                if self.size_weights.is_some() {
                    errors.push("partition.size_weights only applies to task_dependent partitions".into());
                }
            }
            PartitionMode::TaskDependent => {
                if n_clients > Domain::ALL.len() {
                    errors.push(format!(
                        "partition: task_dependent supports at most {} clients, got {n_clients}",
                        Domain::ALL.len()
                    ));
                }
                if let Some(w) = &self.size_weights {
                    if w.len() != n_clients {
                        errors.push(format!(
                            "partition.size_weights has {} entries for {n_clients} clients",
                            w.len()
                        ));
                    }
                    if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                        errors.push("partition.size_weights must be positive and finite".into());
                    }
                }
            }
        }
    }

    pub fn split(&self, data: &DomainSplit, n_clients: usize, rng: &Rng) -> Result<Vec<Vec<Example>>> {
        match self.mode {
            PartitionMode::Iid => partition_iid(data, n_clients, rng),
            PartitionMode::TaskDependent => {
                let weights = match &self.size_weights {
                    Some(w) => w.clone(),
                    None => DEFAULT_TASK_WEIGHTS[..n_clients.min(DEFAULT_TASK_WEIGHTS.len())].to_vec(),
                };
                partition_by_task(data, n_clients, Some(&weights))
            }
        }
    }
}

/// Deals every domain's examples round-robin across clients after a seeded
/// shuffle. Each domain starts where the previous one stopped, so shard
/// sizes and per-domain counts both differ by at most one.
pub fn partition_iid(data: &DomainSplit, n_clients: usize, rng: &Rng) -> Result<Vec<Vec<Example>>> {
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let mut shards = vec![Vec::new(); n_clients];
    let mut next = 0;
    for (d, examples) in data.by_domain.iter().enumerate() {
        if examples.len() < n_clients {
            return Err(Error::Partition(format!(
                "domain {} has {} examples for {n_clients} clients",
                Domain::ALL.get(d).map_or("?", |x| x.name()),
                examples.len()
            )));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.fork(d as u64).shuffle(&mut order);
        for i in order {
            shards[next].push(examples[i].clone());
            next = (next + 1) % n_clients;
        }
    }
    Ok(shards)
}

/// Client `i` receives domain `i`, truncated to
/// `⌊len·w_i / max(w)⌋` examples when weights are given.
pub fn partition_by_task(data: &DomainSplit, n_clients: usize, weights: Option<&[f64]>) -> Result<Vec<Vec<Example>>> {
    if n_clients == 0 || n_clients > data.by_domain.len() {
        return Err(Error::Partition(format!(
            "task partition needs between 1 and {} clients, got {n_clients}",
            data.by_domain.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n_clients || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Partition("size weights must be positive, one per client".into()));
        }
    }
    let max_w = weights.map_or(1.0, |w| w.iter().cloned().fold(0.0, f64::max));
    (0..n_clients)
        .map(|i| {
            let examples = &data.by_domain[i];
            let size = match weights {
                Some(w) => ((examples.len() as f64 * w[i] / max_w) + 1e-9).floor() as usize,
                None => examples.len(),
            };
            if size == 0 {
                return Err(Error::Partition(format!(
                    "shard {i} ({}) would be empty",
                    Domain::ALL.get(i).map_or("?", |x| x.name())
                )));
            }
            Ok(examples[..size].to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn split(per_domain: usize) -> DomainSplit {
        DomainSplit {
            by_domain: Domain::ALL
                .iter()
                .map(|&d| {
                    (0..per_domain)
                        .map(|i| Example::new(d, &format!("{i}"), "x").unwrap())
                        .collect()
                })
                .collect(),
        }
    }

    fn domain_counts(shard: &[Example]) -> Vec<usize> {
        Domain::ALL
            .iter()
            .map(|&d| shard.iter().filter(|e| e.domain == d).count())
            .collect()
    }

    #[test]
    fn iid_shards_are_balanced() {
        let shards = partition_iid(&split(100), 4, &Rng::new(0)).unwrap();
        for s in &shards {
            assert_eq!(s.len(), 200);
            assert_eq!(domain_counts(s), vec![25; 8]);
        }
    }

    #[test]
    fn iid_is_within_one_for_uneven_counts() {
        let shards = partition_iid(&split(7), 3, &Rng::new(1)).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert!(
            sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1,
            "{sizes:?}"
        );
        for d in 0..8 {
            let c: Vec<usize> = shards.iter().map(|s| domain_counts(s)[d]).collect();
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let data = split(5);
        let shards = partition_iid(&data, 1, &Rng::new(2)).unwrap();
        let a: HashSet<_> = shards[0].iter().collect();
        let flat = data.flatten();
        let b: HashSet<_> = flat.iter().collect();
        assert_eq!(a, b);
        assert_eq!(shards[0].len(), 40);
    }

    #[test]
    fn shards_are_disjoint_and_complete() {
        let data = split(9);
        let shards = partition_iid(&data, 4, &Rng::new(3)).unwrap();
        let mut seen = HashSet::new();
        for s in &shards {
            for e in s {
                assert!(seen.insert(e.clone()));
            }
        }
        assert_eq!(seen, data.flatten().into_iter().collect());
        assert!(matches!(
            partition_iid(&split(3), 4, &Rng::new(0)),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn iid_assignment_is_seeded() {
        let data = split(10);
        assert_eq!(
            partition_iid(&data, 3, &Rng::new(4)).unwrap(),
            partition_iid(&data, 3, &Rng::new(4)).unwrap()
        );
        assert_ne!(
            partition_iid(&data, 3, &Rng::new(4)).unwrap(),
            partition_iid(&data, 3, &Rng::new(5)).unwrap()
        );
    }

    #[test]
    fn task_shards_are_domain_pure() {
        let shards = partition_by_task(&split(10), 8, None).unwrap();
        for (i, s) in shards.iter().enumerate() {
            assert_eq!(s.len(), 10);
            assert!(s.iter().all(|e| e.domain == Domain::ALL[i]));
        }
    }

    #[test]
    fn task_weights_set_the_size_ratio() {
        let shards = partition_by_task(&split(500), 2, Some(&[1.0, 0.2])).unwrap();
        assert_eq!((shards[0].len(), shards[1].len()), (500, 100));
        let defaults = partition_by_task(&split(96), 8, Some(&DEFAULT_TASK_WEIGHTS)).unwrap();
        let sizes: Vec<usize> = defaults.iter().map(Vec::len).collect();
        let ratio = *sizes.iter().max().unwrap() as f64 / *sizes.iter().min().unwrap() as f64;
        assert!((4.9..=5.1).contains(&ratio), "{sizes:?}");
    }

    #[test]
    fn empty_domains_are_rejected() {
        let mut data = split(4);
        data.by_domain[2].clear();
        assert!(matches!(partition_by_task(&data, 8, None), Err(Error::Partition(_))));
        assert!(matches!(
            partition_by_task(&split(2), 9, None),
            Err(Error::Partition(_))
        ));
    }
}
