//! Experiment orchestration behind the command-line tool.
//!
//! Every command validates its config before touching the file system and
//! then writes into a single output directory:
//!
//! ```text
//! manifest.json                    config echo, status, sha256 of every file
//! pretrain_loss.csv                step,loss (when the base was trained here)
//! metrics[_<label>].csv            held-out metrics, instruction format
//! reference_metrics[_<label>].csv  pruned models on raw-format text
//! summary.csv                      loss per subject at each stage (run only)
//! checkpoints/base.ckpt
//! checkpoints/[<label>/]pruned_client<i>.ckpt
//! checkpoints/[<label>/]global_round<k>.ckpt
//! checkpoints/[<label>/]final.ckpt, final_client<i>.ckpt
//! FAILED                           only after a run stopped on an error
//! ```

mod config;
mod output;
mod presets;
mod report;

use std::path::{Path, PathBuf};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evalio::{checkpoint_to_bytes, evaluate, load_checkpoint, write_metrics, EvalSuite, MetricsRecord, Stage};
use crate::federation::{pretrain, prune_clients, run_experiment, ExperimentOutcome, Federation, RoundReport};
use crate::math::Rng;
use crate::model::SlmModel;

pub use config::{ExperimentConfig, RunSpec, Variant};
pub use output::{read_manifest, sha256_hex, Manifest, OutputDir, RunStatus, FAILURE_MARKER, MANIFEST_FILE};
pub use presets::{preset, PRESETS};
pub use report::{Comparison, ComparisonRow, StageTable, COMPARISON_HEADER};

/// Corpus and base model for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub base: SlmModel,
    /// Per-step loss when the base was trained rather than loaded.
    pub pretrain_losses: Option<Vec<f64>>,
}

/// Generates the corpus and trains (or loads) the base model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let rng = Rng::new(cfg.seed);
    let corpus = Corpus::generate(&cfg.corpus, &rng.fork_named("corpus"))?;
    if cfg.pretrain.enabled {
        let mut base = SlmModel::new(cfg.model.clone(), &rng.fork_named("model"))?;
        let losses = pretrain(
            &mut base,
            &corpus.pretrain.flatten(),
            &cfg.pretrain,
            &rng.fork_named("pretrain"),
        )?;
        return Ok(Prepared {
            corpus,
            base,
            pretrain_losses: Some(losses),
        });
    }
    let path = cfg
        .pretrain
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("pretrain.checkpoint is required when pretraining is disabled"))?;
    let base = load_checkpoint(path)?;
    if base.config != cfg.model {
        return Err(Error::config(format!(
            "model settings differ from those stored in {}",
            path.display()
        )));
    }
    if !base.masks.is_empty() || base.source_layers != base.config.n_layers {
        return Err(Error::config(format!("{} is not a dense base model", path.display())));
    }
    Ok(Prepared {
        corpus,
        base,
        pretrain_losses: None,
    })
}

/// One finished federated run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub label: Option<String>,
    pub outcome: ExperimentOutcome,
    /// Round 0 evaluation of the base and the pruned clients on the raw
    /// reference split.
    pub reference: Vec<MetricsRecord>,
}

fn reference_records(base: &SlmModel, pruned: &[SlmModel], suite: &EvalSuite) -> Result<Vec<MetricsRecord>> {
    let mut out = evaluate(base, suite)?.records(0, "global", Stage::Pruned);
    for (i, m) in pruned.iter().enumerate() {
        out.extend(evaluate(m, suite)?.records(0, &format!("client{i}"), Stage::Pruned));
    }
    Ok(out)
}

/// Runs every variant of `cfg` on the prepared base. All variants share the
/// same seeded streams, so they differ only where their settings differ.
pub fn run_federated(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    observer: &mut dyn FnMut(&RunSpec, &Federation, &RoundReport) -> Result<()>,
) -> Result<Vec<RunOutcome>> {
    let rng = Rng::new(cfg.seed).fork_named("federation");
    let reference = EvalSuite::new(&prepared.corpus.reference)?;
    cfg.runs()
        .into_iter()
        .map(|spec| {
            let outcome = run_experiment(
                &prepared.base,
                &prepared.corpus,
                spec.setup.clone(),
                &rng,
                &mut |f, r| observer(&spec, f, r),
            )?;
            let reference = reference_records(&prepared.base, &outcome.pruned, &reference)?;
            Ok(RunOutcome {
                label: spec.label,
                outcome,
                reference,
            })
        })
        .collect()
}

/// Validates, opens the output directory and runs `body`, marking the
/// directory failed when `body` errors.
fn with_output<T>(
    cfg: &ExperimentConfig,
    out: &Path,
    command: &str,
    body: impl FnOnce(&mut OutputDir) -> Result<T>,
) -> Result<(Manifest, T)> {
    cfg.validate()?;
    let mut dir = OutputDir::create(out, command, cfg)?;
    match body(&mut dir) {
        Ok(t) => Ok((dir.finish()?, t)),
        Err(e) => {
            dir.fail(&e)?;
            Err(e)
        }
    }
}

fn write_model(dir: &mut OutputDir, rel: &str, model: &SlmModel) -> Result<()> {
    dir.write(rel, &checkpoint_to_bytes(model)?)
}

fn write_records(dir: &mut OutputDir, rel: &str, records: &[MetricsRecord]) -> Result<()> {
    write_metrics(records, &dir.path(rel)?)?;
    dir.record(rel)
}

fn write_base(dir: &mut OutputDir, prepared: &Prepared) -> Result<()> {
    if let Some(losses) = &prepared.pretrain_losses {
        let mut csv = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l:?}\n"));
        }
        dir.write("pretrain_loss.csv", csv.as_bytes())?;
        write_model(dir, "checkpoints/base.ckpt", &prepared.base)?;
    }
    Ok(())
}

/// Trains the base model.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    if !cfg.pretrain.enabled {
        return Err(Error::config("pretrain.enabled is false; nothing to do"));
    }
    with_output(cfg, out, "pretrain", |dir| write_base(dir, &prepare(cfg)?)).map(|(m, _)| m)
}

/// Prunes every configured client and evaluates the results.
pub fn cmd_prune(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    with_output(cfg, out, "prune", |dir| {
        let prepared = prepare(cfg)?;
        write_base(dir, &prepared)?;
        let heldout = EvalSuite::new(&prepared.corpus.heldout)?;
        let reference = EvalSuite::new(&prepared.corpus.reference)?;
        for spec in cfg.runs() {
            let pruned = prune_clients(&prepared.base, &prepared.corpus, &spec.setup.clients)?;
            let mut records = evaluate(&prepared.base, &heldout)?.records(0, "global", Stage::Pruned);
            for (i, m) in pruned.iter().enumerate() {
                write_model(dir, &format!("checkpoints/{}pruned_client{i}.ckpt", spec.prefix()), m)?;
                records.extend(evaluate(m, &heldout)?.records(0, &format!("client{i}"), Stage::Pruned));
            }
            write_records(dir, &format!("metrics{}.csv", spec.suffix()), &records)?;
            let refs = reference_records(&prepared.base, &pruned, &reference)?;
            write_records(dir, &format!("reference_metrics{}.csv", spec.suffix()), &refs)?;
        }
        Ok(())
    })
    .map(|(m, _)| m)
}

/// Full pipeline: base, pruning, federated rounds, metrics and checkpoints.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, StageTable)> {
    with_output(cfg, out, "run", |dir| {
        let prepared = prepare(cfg)?;
        write_base(dir, &prepared)?;
        let runs = run_federated(cfg, &prepared, &mut |spec, fed, report| {
            write_model(
                dir,
                &format!("checkpoints/{}global_round{}.ckpt", spec.prefix(), report.round),
                &fed.global,
            )
        })?;
        for r in &runs {
            let prefix = r.label.as_ref().map_or(String::new(), |l| format!("{l}/"));
            let suffix = r.label.as_ref().map_or(String::new(), |l| format!("_{l}"));
            for (i, m) in r.outcome.pruned.iter().enumerate() {
                write_model(dir, &format!("checkpoints/{prefix}pruned_client{i}.ckpt"), m)?;
            }
            let fed = &r.outcome.federation;
            write_model(dir, &format!("checkpoints/{prefix}final.ckpt"), &fed.global)?;
            for c in &fed.clients {
                write_model(
                    dir,
                    &format!("checkpoints/{prefix}final_{}.ckpt", c.subject()),
                    &c.model,
                )?;
            }
            write_records(dir, &format!("metrics{suffix}.csv"), &r.outcome.metrics)?;
            write_records(dir, &format!("reference_metrics{suffix}.csv"), &r.reference)?;
        }
        let table = StageTable::new(
            &runs
                .iter()
                .map(|r| (r.label.clone(), r.outcome.metrics.as_slice()))
                .collect::<Vec<_>>(),
        );
        dir.write("summary.csv", table.to_csv().as_bytes())?;
        Ok(table)
    })
}

/// Compares the final global model across metrics files. The table is also
/// written to `<out>/comparison.csv` when `out` is given.
pub fn cmd_compare(paths: &[PathBuf], out: Option<&Path>) -> Result<Comparison> {
    let c = Comparison::from_files(paths)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("comparison.csv");
        std::fs::write(&p, c.to_csv()?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(c)
}
