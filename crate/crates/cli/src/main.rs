//! `vfb2-sim`: runs, compares and audits simulated vertical federated
//! training experiments described by a TOML manifest.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 target not reached.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "vfb2-sim", version, about = "Vertical federated backward-updating simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment manifest (flat TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the seeded single-threaded interleaver.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if self.deterministic {
            cfg.execution = "deterministic".into();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train once and write the per-epoch trace CSV.
    Run(Common),
    /// Federated vs centralized vs frozen-passive test metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Manifest for the centralized arm; defaults to --config.
        #[arg(long)]
        centralized: Option<PathBuf>,
        /// Manifest for the frozen-passive arm; defaults to --config.
        #[arg(long)]
        frozen: Option<PathBuf>,
    },
    /// Time-to-target for each party count, as `q,wall_ms,speedup`.
    Speedup {
        #[command(flatten)]
        common: Common,
        /// Comma-separated party counts, overriding `q_list`.
        #[arg(long, value_delimiter = ',')]
        q_list: Option<Vec<usize>>,
    },
    /// Audit 100 masked aggregations for leaked partial products.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Also let every pair of parties pool what they received.
        #[arg(long)]
        simulate_collusion: bool,
        /// Zero all masks so that every partial travels in the clear.
        #[arg(long)]
        unmask_debug: bool,
    },
    /// Print the feature partition and party roles.
    Partition(Common),
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => commands::run(&common.load()?),
        Command::Compare { common, centralized, frozen } => {
            let fed = common.load()?;
            let load_arm = |p: Option<PathBuf>| p.map(|p| ExperimentConfig::load(&p)).transpose();
            let (c, f) = (load_arm(centralized)?, load_arm(frozen)?);
            let report = commands::compare(&fed, c.as_ref(), f.as_ref())?.report();
            print!("{report}");
            if let Some(out) = &fed.out {
                std::fs::write(out, &report)?;
            }
            Ok(())
        }
        Command::Speedup { common, q_list } => {
            let mut cfg = common.load()?;
            if let Some(qs) = q_list {
                cfg.q_list = qs;
            }
            commands::speedup(&cfg).map(|_| ())
        }
        Command::Audit { common, simulate_collusion, unmask_debug } => {
            commands::audit(&common.load()?, simulate_collusion, unmask_debug).map(|_| ())
        }
        Command::Partition(common) => commands::partition(&common.load()?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<vfb2::Error>() {
            return match e {
                vfb2::Error::NonConvergence { .. } => 3,
                vfb2::Error::Parse { .. }
                | vfb2::Error::EmptyData(_)
                | vfb2::Error::Io(_)
                | vfb2::Error::Dimension { .. }
                | vfb2::Error::Numerical(_) => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
