use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Domain;
use crate::error::{Error, Result};

/// Where in a run a model was evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pruned,
    FineTuned,
    GloballyUpdated,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pruned => "pruned",
            Stage::FineTuned => "fine_tuned",
            Stage::GloballyUpdated => "globally_updated",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pruned" => Ok(Stage::Pruned),
            "fine_tuned" => Ok(Stage::FineTuned),
            "globally_updated" => Ok(Stage::GloballyUpdated),
            _ => Err(Error::Parse(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Loss,
    Perplexity,
    Accuracy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Loss, MetricKind::Perplexity, MetricKind::Accuracy];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Loss => "loss",
            MetricKind::Perplexity => "perplexity",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown metric {s:?}")))
    }
}

/// One metric for one model at one point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    /// `global` or `client<id>`.
    pub subject: String,
    pub stage: Stage,
    pub metric: MetricKind,
    /// In [`Domain::ALL`] order.
    pub values: Vec<f64>,
    /// Arithmetic mean of `values`.
    pub average: f64,
}

impl MetricsRecord {
    pub fn new(round: usize, subject: &str, stage: Stage, metric: MetricKind, values: Vec<f64>) -> Self {
        let average = values.iter().sum::<f64>() / values.len().max(1) as f64;
        Self {
            round,
            subject: subject.to_string(),
            stage,
            metric,
            values,
            average,
        }
    }
}

pub fn metrics_header() -> String {
    let mut cols = vec!["round", "subject", "stage", "metric"];
    cols.extend(Domain::ALL.iter().map(|d| d.name()));
    cols.push("average");
    cols.join(",")
}

/// Writes records as CSV. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut out = metrics_header();
    out.push('\n');
    for r in records {
        if r.values.len() != Domain::ALL.len() {
            return Err(Error::Shape(format!(
                "record for {} has {} domain values",
                r.subject,
                r.values.len()
            )));
        }
        if r.subject.contains([',', '\n']) {
            return Err(Error::Input(format!(
                "subject {:?} cannot be written to CSV",
                r.subject
            )));
        }
        out.push_str(&format!("{},{},{},{}", r.round, r.subject, r.stage, r.metric));
        for v in r.values.iter().chain(std::iter::once(&r.average)) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != metrics_header() {
        return Err(Error::Schema(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let n_cols = 5 + Domain::ALL.len();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let at = || format!("{} line {}", path.display(), i + 2);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_cols {
                return Err(Error::Schema(format!(
                    "{}: expected {n_cols} columns, found {}",
                    at(),
                    fields.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}: bad number {s:?}", at())))
            };
            let values = fields[4..n_cols - 1]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsRecord {
                round: fields[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("{}: bad round {:?}", at(), fields[0])))?,
                subject: fields[1].to_string(),
                stage: fields[2].parse()?,
                metric: fields[3].parse()?,
                values,
                average: num(fields[n_cols - 1])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, subject: &str) -> MetricsRecord {
        MetricsRecord::new(
            round,
            subject,
            Stage::GloballyUpdated,
            MetricKind::Loss,
            vec![0.1, 1.0 / 3.0, 2.5e-12, 7.0, 1e300, 0.0, 1.25, std::f64::consts::PI],
        )
    }

    #[test]
    fn empty_list_writes_only_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&[], &p).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "round,subject,stage,metric,copy,reverse,sort_digits,brackets,arithmetic,palindrome,counting,template,average\n"
        );
        assert!(read_metrics(&p).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let recs = vec![record(0, "global"), record(3, "client2")];
        write_metrics(&recs, &p).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), recs);
    }

    #[test]
    fn average_is_the_mean() {
        let r = record(0, "global");
        let mean = r.values.iter().sum::<f64>() / 8.0;
        assert!((r.average - mean).abs() <= 1e-9 * mean.abs());
    }

    #[test]
    fn schema_and_missing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        assert!(matches!(read_metrics(&p), Err(Error::Missing(_))));
        fs::write(&p, "round,subject\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Schema(_))));
        fs::write(&p, format!("{}\n1,global,pruned,loss,1\n", metrics_header())).unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Schema(_))));
    }
}
