//! Command bodies. Each writes its artifacts, the resolved configuration
//! and a manifest into the output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use iae_core::bidding::{run_experiment, AuctionLog, Market};
use iae_core::dataset::{Dataset, Sidecar};
use iae_core::evaluation::{append_ledger, bound_check};
use iae_core::model::{load_outcome_model, ModelSidecar};
use iae_core::synthetic::generate;
use iae_core::trainer::train;

use crate::config::RunConfig;
use crate::manifest::{write_json, FileHash, Invocation, Manifest, MANIFEST_FORMAT, MANIFEST_VERSION};
use crate::InputError;

pub const DATA_FILE: &str = "data.csv";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PEHE_REPORT_FILE: &str = "pehe_report.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const EXPERIMENT_REPORT_FILE: &str = "experiment_report.json";
pub const SERIES_FILE: &str = "series.csv";
pub const AUCTION_LOG_FILE: &str = "auction_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

fn require(path: &Path, what: &str) -> Result<PathBuf> {
    if !path.is_file() {
        return Err(InputError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))?)
}

/// Files read by `invocation`, with absolute paths.
fn input_files(invocation: &Invocation) -> Result<Vec<PathBuf>> {
    let dataset = |p: &Path| -> Result<Vec<PathBuf>> {
        let csv = require(p, "dataset")?;
        let sidecar = require(&Sidecar::path_for(&csv), "dataset sidecar")?;
        Ok(vec![csv, sidecar])
    };
    let checkpoint = |p: &Path| -> Result<Vec<PathBuf>> {
        let ckpt = require(p, "checkpoint")?;
        let sidecar = require(&ModelSidecar::path_for(&ckpt), "checkpoint sidecar")?;
        Ok(vec![ckpt, sidecar])
    };
    Ok(match invocation {
        Invocation::Generate => vec![],
        Invocation::Train { data } => dataset(data)?,
        Invocation::Evaluate {
            checkpoint: c, data, ..
        } => [checkpoint(c)?, dataset(data)?].concat(),
        Invocation::Simulate {
            checkpoint: c,
            data,
            log,
        } => {
            let mut files = checkpoint(c)?;
            files.push(require(&Sidecar::path_for(data), "dataset sidecar")?);
            if let Some(l) = log {
                files.push(require(l, "auction log")?);
            }
            files
        }
    })
}

/// Rewrites input paths as absolute ones so the manifest can be replayed
/// from anywhere.
pub fn absolute(invocation: Invocation) -> Result<Invocation> {
    let abs = |p: PathBuf| -> Result<PathBuf> {
        Ok(if p.is_absolute() {
            p
        } else {
            std::env::current_dir()?.join(p)
        })
    };
    Ok(match invocation {
        Invocation::Generate => Invocation::Generate,
        Invocation::Train { data } => Invocation::Train { data: abs(data)? },
        Invocation::Evaluate {
            checkpoint,
            data,
            ledger,
        } => Invocation::Evaluate {
            checkpoint: abs(checkpoint)?,
            data: abs(data)?,
            ledger: ledger.map(abs).transpose()?,
        },
        Invocation::Simulate { checkpoint, data, log } => Invocation::Simulate {
            checkpoint: abs(checkpoint)?,
            data: abs(data)?,
            log: log.map(abs).transpose()?,
        },
    })
}

/// Runs `invocation` into `out` and returns its manifest.
pub fn execute(invocation: &Invocation, cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let inputs = input_files(invocation)?;
    let input_hashes = inputs
        .iter()
        .map(|p| FileHash::of(p, p.clone()))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut cfg = cfg.clone();
    let mut artifacts = match invocation {
        Invocation::Generate => run_generate(&cfg, out)?,
        Invocation::Train { data } => run_train(&mut cfg, data, out)?,
        Invocation::Evaluate {
            checkpoint,
            data,
            ledger,
        } => run_evaluate(&cfg, checkpoint, data, ledger.as_deref(), out)?,
        Invocation::Simulate { checkpoint, data, log } => run_simulate(&cfg, checkpoint, data, log.as_deref(), out)?,
    };
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)
        .with_context(|| format!("writing {}", out.join(RESOLVED_CONFIG_FILE).display()))?;
    artifacts.push(RESOLVED_CONFIG_FILE.into());

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        invocation: invocation.clone(),
        config: cfg,
        inputs: input_hashes,
        artifacts: artifacts
            .into_iter()
            .map(|name| FileHash::of(&out.join(&name), name))
            .collect::<Result<Vec<_>>>()?,
    };
    manifest.save(out)?;
    Ok(manifest)
}

fn run_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, _) = generate(&cfg.generate)?;
    let path = out.join(DATA_FILE);
    data.save(&path)?;
    println!(
        "generated {} samples with {} treatments -> {}",
        data.len(),
        data.n_treatments(),
        path.display()
    );
    Ok(vec![DATA_FILE.into(), file_name(&Sidecar::path_for(&path))])
}

fn run_train(cfg: &mut RunConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let data = Dataset::load(data)?;
    cfg.model.input_dim = data.dim();
    cfg.model.n_treatments = data.n_treatments();
    let (model, mut report) = train(&data, &cfg.model, &cfg.train)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    report.checkpoint = Some(CHECKPOINT_FILE.into());
    write_json(&out.join(TRAIN_REPORT_FILE), &report)?;
    let log = File::create(out.join(TRAIN_LOG_FILE)).with_context(|| format!("creating {TRAIN_LOG_FILE}"))?;
    report.write_csv(BufWriter::new(log))?;
    println!(
        "trained {} epochs (best {:?}, validation factual {:?}) -> {}",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_factual,
        ckpt.display()
    );
    Ok(vec![
        CHECKPOINT_FILE.into(),
        file_name(&ModelSidecar::path_for(&ckpt)),
        TRAIN_REPORT_FILE.into(),
        TRAIN_LOG_FILE.into(),
    ])
}

fn run_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    ledger: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let model = load_outcome_model(checkpoint)?;
    let data = Dataset::load(data)?;
    let report = bound_check(model.as_ref(), &data, cfg.evaluate.beta, &cfg.evaluate.eval)?;
    write_json(&out.join(PEHE_REPORT_FILE), &report)?;
    let ledger = ledger.map(Path::to_path_buf).unwrap_or_else(|| out.join(LEDGER_FILE));
    append_ledger(&ledger, &out.display().to_string(), &report)?;
    println!(
        "PEHE {:.6}; adjacent sum {:.6} (holds: {}); weighted bound {:.6} (holds: {})",
        report.pehe,
        report.adjacent_bound,
        report.adjacent_bound_holds,
        report.weighted_adjacent_bound,
        report.weighted_adjacent_bound_holds
    );
    Ok(vec![PEHE_REPORT_FILE.into()])
}

fn run_simulate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    log: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let model = load_outcome_model(checkpoint)?;
    let sidecar = Sidecar::load(&Sidecar::path_for(data))?;
    let (Some(world), Some(truth)) = (sidecar.generator, sidecar.ground_truth) else {
        return Err(InputError(format!(
            "{}: simulation needs a synthetic dataset with generator and ground truth",
            data.display()
        ))
        .into());
    };
    let market = Market::new(&world, truth, cfg.market.clone())?;
    let mut artifacts = Vec::new();
    let log = match log {
        Some(p) => AuctionLog::load(p)?,
        None => {
            let days = cfg.experiment.history_days + cfg.experiment.experiment_days;
            let log = market.auction_logs(0..days);
            log.save(&out.join(AUCTION_LOG_FILE))?;
            artifacts.push(AUCTION_LOG_FILE.into());
            log
        }
    };
    let report = run_experiment(&market, model.as_ref(), Some(&log), &cfg.experiment)?;
    write_json(&out.join(EXPERIMENT_REPORT_FILE), &report)?;
    let series = File::create(out.join(SERIES_FILE)).with_context(|| format!("creating {SERIES_FILE}"))?;
    report.write_csv(BufWriter::new(series))?;
    let s = &report.summary;
    println!(
        "all-channel ratio {:?} (paired {:?}), ad-click ratio {:?}, organic ratio {:?}, cost ratio {:?}",
        s.ratio_all_clicks, s.paired_all_clicks, s.ratio_ad_clicks, s.ratio_organic_clicks, s.paired_cost
    );
    artifacts.extend([EXPERIMENT_REPORT_FILE.into(), SERIES_FILE.into()]);
    Ok(artifacts)
}

fn file_name(path: &Path) -> PathBuf {
    PathBuf::from(path.file_name().expect("artifact path has a file name"))
}

/// Differences between the artifacts of two manifests, by path.
pub fn compare(original: &Manifest, rerun: &Manifest) -> Vec<String> {
    let mut diffs = Vec::new();
    for a in &original.artifacts {
        match rerun.artifacts.iter().find(|b| b.path == a.path) {
            None => diffs.push(format!("{}: missing from rerun", a.path.display())),
            Some(b) if b.sha256 != a.sha256 => diffs.push(format!("{}: hash differs", a.path.display())),
            Some(_) => {}
        }
    }
    for b in &rerun.artifacts {
        if !original.artifacts.iter().any(|a| a.path == b.path) {
            diffs.push(format!("{}: not in the original run", b.path.display()));
        }
    }
    diffs
}

/// Checks that the inputs recorded in `manifest` are unchanged.
pub fn verify_inputs(manifest: &Manifest) -> Result<()> {
    for input in &manifest.inputs {
        if !input.path.is_file() {
            return Err(InputError(format!("input not found: {}", input.path.display())).into());
        }
        let now = FileHash::of(&input.path, input.path.clone())?;
        if now.sha256 != input.sha256 {
            return Err(InputError(format!("input changed since the run: {}", input.path.display())).into());
        }
    }
    Ok(())
}
