use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, MAX_EXAMPLE_TOKENS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::federation::{
    AggregationConfig, FederationConfig, FederationSetup, PartitionMode, PartitionSpec, PretrainConfig,
};
use crate::model::ModelConfig;
use crate::pruning::PruneSpec;

/// Everything one experiment needs. Loaded from TOML; unknown keys anywhere
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Worker threads; the CLI flag and `LEGO_THREADS` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Defaults to `runs/<name>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub pretrain: PretrainConfig,
    pub clients: Vec<PruneSpec>,
    pub partition: PartitionSpec,
    pub federation: FederationConfig,
    pub aggregation: AggregationConfig,
    /// Clients that train but never contribute to aggregation.
    pub exclude_clients: Vec<usize>,
    /// Extra labeled runs sharing the base model. When present, only the
    /// variants run.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            threads: None,
            output_dir: None,
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            pretrain: PretrainConfig::default(),
            clients: vec![PruneSpec::dense()],
            partition: PartitionSpec::default(),
            federation: FederationConfig::default(),
            aggregation: AggregationConfig::default(),
            exclude_clients: Vec::new(),
            variants: Vec::new(),
        }
    }
}

/// A labeled override of the client list or the exclusion set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_clients: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<PruneSpec>>,
}

/// One federated run after variants are resolved.
#[derive(Clone, Debug)]
pub struct RunSpec {
    /// `None` for a config without variants.
    pub label: Option<String>,
    pub setup: FederationSetup,
}

impl RunSpec {
    /// Suffix for file names: `""` or `"_<label>"`.
    pub fn suffix(&self) -> String {
        self.label.as_ref().map_or(String::new(), |l| format!("_{l}"))
    }

    /// Checkpoint subdirectory: `""` or `"<label>/"`.
    pub fn prefix(&self) -> String {
        self.label.as_ref().map_or(String::new(), |l| format!("{l}/"))
    }
}

fn is_file_safe(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !s.starts_with('.')
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msgs) => {
                Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Input(format!("cannot serialize config: {e}")))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        if !is_file_safe(&self.name) {
            e.push(format!(
                "name {:?} must be non-empty and use only letters, digits, '-', '_' and '.'",
                self.name
            ));
        }
        if self.threads == Some(0) {
            e.push("threads must be at least 1".into());
        }
        self.model.validate(&mut e);
        if self.model.vocab_size != VOCAB_SIZE {
            e.push(format!(
                "model.vocab_size must be {VOCAB_SIZE} to match the corpus, got {}",
                self.model.vocab_size
            ));
        }
        if self.model.max_seq_len < MAX_EXAMPLE_TOKENS - 1 {
            e.push(format!(
                "model.max_seq_len must be at least {} to fit every example, got {}",
                MAX_EXAMPLE_TOKENS - 1,
                self.model.max_seq_len
            ));
        }
        self.corpus.validate(&mut e);
        self.pretrain.validate(&mut e);
        self.federation.validate(&mut e);

        if self.variants.is_empty() {
            self.validate_clients("clients", &self.clients, &self.exclude_clients, &mut e);
        } else {
            let mut labels = BTreeSet::new();
            for (i, v) in self.variants.iter().enumerate() {
                let at = format!("variants[{i}]");
                if !is_file_safe(&v.label) {
                    e.push(format!("{at}.label {:?} must be a plain file-name fragment", v.label));
                }
                if !labels.insert(v.label.as_str()) {
                    e.push(format!("{at}.label {:?} is used twice", v.label));
                }
                let clients = v.clients.as_ref().unwrap_or(&self.clients);
                let excluded = v.exclude_clients.as_ref().unwrap_or(&self.exclude_clients);
                let where_ = if v.clients.is_some() {
                    format!("{at}.clients")
                } else {
                    "clients".into()
                };
                self.validate_clients(&where_, clients, excluded, &mut e);
            }
        }

        e.dedup();
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    fn validate_clients(&self, at: &str, clients: &[PruneSpec], excluded: &[usize], e: &mut Vec<String>) {
        let n = clients.len();
        if n == 0 {
            e.push(format!("{at} must list at least one client"));
        }
        for (i, c) in clients.iter().enumerate() {
            c.validate(&format!("{at}[{i}]"), self.model.n_layers, e);
        }
        self.partition.validate(n, e);
        if self.partition.mode == PartitionMode::Iid && self.corpus.finetune_per_domain < n {
            e.push(format!(
                "corpus.finetune_per_domain ({}) is too small to give each of {n} clients an example per domain",
                self.corpus.finetune_per_domain
            ));
        }
        for &x in excluded {
            if x >= n {
                e.push(format!("exclude_clients entry {x} is out of range for {n} clients"));
            }
        }
    }

    /// The federated runs this config describes, in order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let make = |label: Option<String>, clients: &[PruneSpec], excluded: &[usize]| RunSpec {
            label,
            setup: FederationSetup {
                clients: clients.to_vec(),
                partition: self.partition.clone(),
                federation: self.federation.clone(),
                aggregation: self.aggregation,
                excluded: excluded.iter().copied().collect(),
            },
        };
        if self.variants.is_empty() {
            return vec![make(None, &self.clients, &self.exclude_clients)];
        }
        self.variants
            .iter()
            .map(|v| {
                make(
                    Some(v.label.clone()),
                    v.clients.as_deref().unwrap_or(&self.clients),
                    v.exclude_clients.as_deref().unwrap_or(&self.exclude_clients),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::Strategy;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\nsede = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = ExperimentConfig::from_toml("[federation]\nround = 3\n").unwrap_err();
        assert!(err.to_string().contains("round"), "{err}");
    }

    #[test]
    fn validation_reports_every_problem() {
        let mut c = ExperimentConfig {
            name: "bad name".into(),
            exclude_clients: vec![4],
            ..ExperimentConfig::default()
        };
        c.federation.rounds = 0;
        c.federation.lr = -1.0;
        c.clients = vec![PruneSpec {
            sparsity: Some(1.5),
            ..PruneSpec::unstructured(Strategy::Magnitude, 0.0)
        }];
        let Err(Error::Config(msgs)) = c.validate() else {
            panic!("expected config error");
        };
        assert_eq!(msgs.len(), 5, "{msgs:#?}");
        assert!(msgs.iter().any(|m| m.contains("clients[0]")));
    }

    #[test]
    fn variants_resolve_in_order() {
        let mut c = ExperimentConfig {
            clients: vec![PruneSpec::dense(); 3],
            variants: vec![
                Variant {
                    label: "a".into(),
                    exclude_clients: Some(vec![2]),
                    clients: None,
                },
                Variant {
                    label: "b".into(),
                    exclude_clients: None,
                    clients: Some(vec![PruneSpec::dense()]),
                },
            ],
            ..ExperimentConfig::default()
        };
        c.validate().unwrap();
        let runs = c.runs();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].suffix(), "_a");
        assert_eq!(runs[0].setup.excluded, BTreeSet::from([2]));
        assert_eq!(runs[1].setup.clients.len(), 1);
        assert_eq!(runs[1].prefix(), "b/");

        c.variants[1].label = "a".into();
        c.variants[1].exclude_clients = Some(vec![1]);
        let Err(Error::Config(msgs)) = c.validate() else {
            panic!("expected config error");
        };
        assert!(msgs.iter().any(|m| m.contains("used twice")));
        assert!(msgs.iter().any(|m| m.contains("out of range")));
    }

    #[test]
    fn corpus_length_bounds_the_context() {
        let mut c = ExperimentConfig::default();
        c.model.max_seq_len = 8;
        assert!(c.validate().is_err());
        c.model.max_seq_len = MAX_EXAMPLE_TOKENS - 1;
        c.validate().unwrap();
    }
}
