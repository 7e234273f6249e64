//! Tables rendered from metrics records.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::evalio::{read_metrics, MetricKind, MetricsRecord, Stage};

fn fmt_opt(v: Option<f64>, precise: bool) -> String {
    match v {
        Some(x) if precise => format!("{x:?}"),
        Some(x) => format!("{x:.4}"),
        None => String::new(),
    }
}

/// Left-aligned first column, right-aligned numbers.
fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            rows.iter()
                .map(|r| r[j].len())
                .chain(std::iter::once(header[j].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 {
                    format!("{c:<w$}", w = widths[j])
                } else {
                    format!("{c:>w$}", w = widths[j])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn loss_of(records: &[MetricsRecord], subject: &str, pick: impl Fn(&MetricsRecord) -> bool) -> Option<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.subject == subject && r.metric == MetricKind::Loss && pick(r))
        .map(|r| (r.round, r.average))
        .max_by_key(|&(round, _)| round)
}

/// Average held-out loss of every subject at three points of a run:
/// right after pruning, after its last local fine-tune, and after the last
/// global update. One column group per labeled run.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl StageTable {
    pub fn new(runs: &[(Option<String>, &[MetricsRecord])]) -> Self {
        let mut subjects: Vec<String> = Vec::new();
        for (_, recs) in runs {
            for r in recs.iter() {
                if !subjects.contains(&r.subject) {
                    subjects.push(r.subject.clone());
                }
            }
        }
        let key = |s: &String| match s.strip_prefix("client").and_then(|n| n.parse::<usize>().ok()) {
            Some(i) => (1, i, String::new()),
            None if s == "global" => (0, 0, String::new()),
            None => (2, 0, s.clone()),
        };
        subjects.sort_by_key(key);

        let mut columns = Vec::new();
        for (label, _) in runs {
            let l = label.as_deref().unwrap_or("run");
            for stage in ["pruned", "fine_tuned", "final"] {
                columns.push(format!("{l}.{stage}"));
            }
        }
        let rows = subjects
            .into_iter()
            .map(|s| {
                let mut cells = Vec::new();
                for (_, recs) in runs {
                    cells.push(loss_of(recs, &s, |r| r.round == 0 && r.stage == Stage::Pruned).map(|x| x.1));
                    cells.push(loss_of(recs, &s, |r| r.stage == Stage::FineTuned).map(|x| x.1));
                    cells.push(loss_of(recs, &s, |r| r.stage == Stage::GloballyUpdated).map(|x| x.1));
                }
                (s, cells)
            })
            .collect();
        Self { columns, rows }
    }

    pub fn get(&self, subject: &str, column: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|(s, _)| s == subject).and_then(|(_, v)| v[j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("subject,{}\n", self.columns.join(","));
        for (s, cells) in &self.rows {
            let vals: Vec<String> = cells.iter().map(|&v| fmt_opt(v, true)).collect();
            out.push_str(&format!("{s},{}\n", vals.join(",")));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut header = vec!["subject".to_string()];
        header.extend(self.columns.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(s, cells)| {
                std::iter::once(s.clone())
                    .chain(cells.iter().map(|&v| fmt_opt(v, false)))
                    .collect()
            })
            .collect();
        aligned(&header, &rows)
    }
}

/// The global model's latest evaluation in one metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub file: String,
    pub round: usize,
    pub stage: Stage,
    pub loss: f64,
    pub accuracy: f64,
    /// Relative to the first file.
    pub delta_loss: f64,
    pub delta_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: &str = "file,round,stage,loss,accuracy,delta_loss,delta_accuracy";

impl Comparison {
    pub fn from_files(paths: &[PathBuf]) -> Result<Self> {
        let named = paths
            .iter()
            .map(|p| Ok((p.display().to_string(), read_metrics(p)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(&named)
    }

    pub fn from_records(named: &[(String, Vec<MetricsRecord>)]) -> Result<Self> {
        if named.len() < 2 {
            return Err(Error::Input(format!(
                "need at least two metrics files, got {}",
                named.len()
            )));
        }
        let mut rows: Vec<ComparisonRow> = Vec::with_capacity(named.len());
        for (file, recs) in named {
            let last = recs
                .iter()
                .filter(|r| r.subject == "global" && r.metric == MetricKind::Loss)
                .max_by_key(|r| (r.round, r.stage))
                .ok_or_else(|| Error::Schema(format!("{file}: no loss rows for the global model")))?;
            let accuracy = recs
                .iter()
                .find(|r| {
                    r.subject == "global"
                        && r.metric == MetricKind::Accuracy
                        && r.round == last.round
                        && r.stage == last.stage
                })
                .ok_or_else(|| Error::Schema(format!("{file}: no accuracy row for the global model")))?
                .average;
            let (l0, a0) = rows.first().map_or((last.average, accuracy), |r| (r.loss, r.accuracy));
            rows.push(ComparisonRow {
                file: file.clone(),
                round: last.round,
                stage: last.stage,
                loss: last.average,
                accuracy,
                delta_loss: last.average - l0,
                delta_accuracy: accuracy - a0,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for r in &self.rows {
            if r.file.contains([',', '\n']) {
                return Err(Error::Input(format!("file name {:?} cannot be written to CSV", r.file)));
            }
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?}\n",
                r.file, r.round, r.stage, r.loss, r.accuracy, r.delta_loss, r.delta_accuracy
            ));
        }
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let header: Vec<String> = COMPARISON_HEADER.split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.file.clone(),
                    r.round.to_string(),
                    r.stage.to_string(),
                    format!("{:.4}", r.loss),
                    format!("{:.4}", r.accuracy),
                    format!("{:+.4}", r.delta_loss),
                    format!("{:+.4}", r.delta_accuracy),
                ]
            })
            .collect();
        aligned(&header, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, subject: &str, stage: Stage, metric: MetricKind, v: f64) -> MetricsRecord {
        MetricsRecord::new(round, subject, stage, metric, vec![v; 8])
    }

    fn run(final_loss: f64) -> Vec<MetricsRecord> {
        vec![
            rec(0, "global", Stage::Pruned, MetricKind::Loss, 2.0),
            rec(0, "global", Stage::Pruned, MetricKind::Accuracy, 0.3),
            rec(0, "client0", Stage::Pruned, MetricKind::Loss, 2.5),
            rec(1, "client0", Stage::FineTuned, MetricKind::Loss, 2.25),
            rec(1, "global", Stage::GloballyUpdated, MetricKind::Loss, final_loss),
            rec(1, "global", Stage::GloballyUpdated, MetricKind::Accuracy, 0.4),
            rec(1, "client0", Stage::GloballyUpdated, MetricKind::Loss, 2.375),
        ]
    }

    #[test]
    fn comparison_uses_the_last_global_row() {
        let c = Comparison::from_records(&[("a".into(), run(1.5)), ("b".into(), run(1.25))]).unwrap();
        assert_eq!(c.rows[0].round, 1);
        assert_eq!(c.rows[0].stage, Stage::GloballyUpdated);
        assert_eq!(c.rows[0].delta_loss, 0.0);
        assert_eq!(c.rows[1].delta_loss, -0.25);
        let csv = c.to_csv().unwrap();
        assert!(csv.starts_with(COMPARISON_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(c.to_table().contains("-0.2500"));
    }

    #[test]
    fn identical_inputs_give_zero_deltas() {
        let c = Comparison::from_records(&[("a".into(), run(1.5)), ("a".into(), run(1.5))]).unwrap();
        assert!(c.rows.iter().all(|r| r.delta_loss == 0.0 && r.delta_accuracy == 0.0));
    }

    #[test]
    fn comparison_needs_global_rows() {
        let no_global: Vec<_> = run(1.0).into_iter().filter(|r| r.subject != "global").collect();
        let err = Comparison::from_records(&[("a".into(), run(1.0)), ("b".into(), no_global)]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(matches!(
            Comparison::from_records(&[("a".into(), run(1.0))]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn stage_table_picks_each_stage() {
        let a = run(1.5);
        let t = StageTable::new(&[(Some("x".into()), &a), (None, &a)]);
        assert_eq!(t.columns.len(), 6);
        assert_eq!(t.rows[0].0, "global");
        assert_eq!(t.get("client0", "x.pruned"), Some(2.5));
        assert_eq!(t.get("client0", "x.fine_tuned"), Some(2.25));
        assert_eq!(t.get("client0", "run.final"), Some(2.375));
        assert_eq!(t.get("global", "x.fine_tuned"), None);
        assert_eq!(t.to_csv().lines().count(), 3);
        assert!(t.to_table().starts_with("subject"));
    }
}
