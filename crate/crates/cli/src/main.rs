//! `iae`: synthetic data generation, training, PEHE bound evaluation and
//! leverage-rate bidding simulation. Every run directory holds the
//! resolved configuration and a manifest with input and artifact hashes;
//! `iae rerun` re-executes a manifest and compares the artifacts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input
//! error.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use iae_core::bidding::PolicyKind;

use crate::config::RunConfig;
use crate::manifest::{Invocation, Manifest, MANIFEST_FILE};

/// A configuration or input problem; exits with code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser, Debug)]
#[command(
    name = "iae",
    version,
    about = "Individual advertising effects: train, check bounds, simulate bidding"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed for every random stream of the command.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Lvr,
    Baseline,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with its ground-truth sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        n_treatments: Option<usize>,
        /// Selection-bias strength b.
        #[arg(long)]
        bias: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the representation and hypothesis networks.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; its sidecar is read from the same stem with `.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Compute PEHE and the bound terms against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// IPM weight of the surrogate bound.
        #[arg(long)]
        beta: Option<f64>,
        /// Ledger CSV to append to; defaults to the output directory.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Run the bidding experiment with kappa calibrated to cost parity.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Synthetic dataset whose sidecar defines the world.
        #[arg(long)]
        data: PathBuf,
        /// Auction log CSV; generated from the market when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Policy of the experiment group.
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        ads: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        /// Relative cost gap accepted by the kappa calibration.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Re-execute a run from its manifest and compare artifacts.
    Rerun {
        /// Run directory or its manifest.json.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to `rerun` inside the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn prepare(command: Command) -> Result<(Invocation, RunConfig, PathBuf)> {
    Ok(match command {
        Command::Generate {
            common,
            n_samples,
            n_treatments,
            bias,
            noise,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            let g = &mut cfg.generate;
            set(&mut g.seed, common.seed);
            set(&mut g.n_samples, n_samples);
            set(&mut g.n_treatments, n_treatments);
            set(&mut g.selection_bias, bias);
            set(&mut g.noise_std, noise);
            (Invocation::Generate, cfg, common.out)
        }
        Command::Train {
            common,
            data,
            beta,
            lambda,
            epochs,
            batch_size,
            learning_rate,
            patience,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            set(&mut cfg.model.seed, common.seed);
            let t = &mut cfg.train;
            set(&mut t.seed, common.seed);
            set(&mut t.beta, beta);
            set(&mut t.lambda, lambda);
            set(&mut t.max_epochs, epochs);
            set(&mut t.batch_size, batch_size);
            set(&mut t.adam.learning_rate, learning_rate);
            set(&mut t.patience, patience);
            (Invocation::Train { data }, cfg, common.out)
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            beta,
            ledger,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            set(&mut cfg.evaluate.eval.seed, common.seed);
            set(&mut cfg.evaluate.beta, beta);
            (
                Invocation::Evaluate {
                    checkpoint,
                    data,
                    ledger,
                },
                cfg,
                common.out,
            )
        }
        Command::Simulate {
            common,
            checkpoint,
            data,
            log,
            policy,
            ads,
            days,
            tolerance,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            set(&mut cfg.market.seed, common.seed);
            set(&mut cfg.market.n_ads, ads);
            let e = &mut cfg.experiment;
            set(&mut e.seed, common.seed);
            set(&mut e.experiment_days, days);
            set(&mut e.kappa.tolerance, tolerance);
            set(
                &mut e.experiment_policy,
                policy.map(|p| match p {
                    PolicyArg::Lvr => PolicyKind::Lvr,
                    PolicyArg::Baseline => PolicyKind::Baseline,
                }),
            );
            (Invocation::Simulate { checkpoint, data, log }, cfg, common.out)
        }
        Command::Rerun { .. } => unreachable!("rerun is dispatched separately"),
    })
}

fn rerun(manifest: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let path = if manifest.is_dir() {
        manifest.join(MANIFEST_FILE)
    } else {
        manifest
    };
    let original = Manifest::load(&path)?;
    commands::verify_inputs(&original)?;
    let run_dir = path.parent().map(PathBuf::from).unwrap_or_default();
    let out = out.unwrap_or_else(|| run_dir.join("rerun"));
    let invocation = match original.invocation.clone() {
        // a rerun must not append to the original ledger
        Invocation::Evaluate { checkpoint, data, .. } => Invocation::Evaluate {
            checkpoint,
            data,
            ledger: None,
        },
        other => other,
    };
    let fresh = commands::execute(&invocation, &original.config, &out)?;
    let diffs = commands::compare(&original, &fresh);
    if diffs.is_empty() {
        println!(
            "reproduced {} artifacts bit-identically in {}",
            fresh.artifacts.len(),
            out.display()
        );
        Ok(())
    } else {
        anyhow::bail!("rerun differs from {}:\n  {}", path.display(), diffs.join("\n  "))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rerun { manifest, out } => rerun(manifest, out),
        command => {
            let (invocation, cfg, out) = prepare(command)?;
            let invocation = commands::absolute(invocation)?;
            let manifest = commands::execute(&invocation, &cfg, &out)?;
            log::info!(
                "wrote {} artifacts and {}",
                manifest.artifacts.len(),
                out.join(MANIFEST_FILE).display()
            );
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use iae_core::Error as E;
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_)
                | E::ContextDim { .. }
                | E::TreatmentOutOfRange { .. }
                | E::EmptyDataset
                | E::MalformedRow { .. }
                | E::Positivity { .. }
                | E::MissingGroundTruth
                | E::UndefinedLeverage(_)
                | E::MissingHistory(_)
                | E::Json { .. }
                | E::Format { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
