//! `lego`: run pruning and federated fine-tuning experiments from a config
//! file or a named preset.
//!
//! Exit codes: 0 ok, 2 invalid config or usage, 3 missing input, 4 schema or
//! format mismatch, 5 numeric failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lego_core::runner::{self, ExperimentConfig, PRESETS};
use lego_core::Error;

#[derive(Parser)]
#[command(name = "lego", version, about = "Sparse sub-model federation simulator")]
struct Cli {
    /// Worker threads for parallel evaluation and calibration.
    #[arg(long, global = true, env = "LEGO_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense base model.
    Pretrain(ExperimentArgs),
    /// Prune every configured client from the base and evaluate it.
    Prune(ExperimentArgs),
    /// Run the whole pipeline: pretrain, prune, federate, evaluate.
    Run(ExperimentArgs),
    /// Compare the final global model across metrics files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        /// Also write comparison.csv into this directory.
        #[arg(long, env = "LEGO_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// List the shipped presets.
    Presets,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset; see `lego presets`.
    #[arg(long)]
    preset: Option<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's, then runs/<name>.
    #[arg(long, env = "LEGO_OUT_DIR")]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> lego_core::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => runner::preset(name)?,
            (None, None) => return Err(Error::config("pass --config or --preset")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir());
        cfg.output_dir = Some(out.clone());
        Ok((cfg, out))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Partition(_) => 2,
        Error::Missing(_) => 3,
        Error::Schema(_) | Error::Parse(_) | Error::UnsupportedVersion { .. } => 4,
        Error::Numeric(_) => 5,
        _ => 1,
    }
}

fn init_threads(flag: Option<usize>, cfg: Option<usize>) -> lego_core::Result<()> {
    let Some(n) = flag.or(cfg) else {
        return Ok(());
    };
    if n == 0 {
        return Err(Error::config("threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Input(format!("cannot start {n} worker threads: {e}")))
}

fn execute(cli: Cli) -> lego_core::Result<()> {
    match cli.command {
        Command::Presets => {
            let width = PRESETS.iter().map(|p| p.0.len()).max().unwrap_or(0);
            for (name, about) in PRESETS {
                println!("{name:<width$}  {about}");
            }
        }
        Command::Compare { files, out } => {
            init_threads(cli.threads, None)?;
            let c = runner::cmd_compare(&files, out.as_deref())?;
            print!("{}", c.to_table());
        }
        Command::Pretrain(args) => {
            let (cfg, out) = args.load()?;
            init_threads(cli.threads, cfg.threads)?;
            let m = runner::cmd_pretrain(&cfg, &out)?;
            eprintln!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Prune(args) => {
            let (cfg, out) = args.load()?;
            init_threads(cli.threads, cfg.threads)?;
            let m = runner::cmd_prune(&cfg, &out)?;
            eprintln!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Run(args) => {
            let (cfg, out) = args.load()?;
            init_threads(cli.threads, cfg.threads)?;
            let (m, table) = runner::cmd_run(&cfg, &out)?;
            print!("{}", table.to_table());
            eprintln!("wrote {} files to {}", m.files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
