//! Training runs and their on-disk layout.
//!
//! A run directory holds `manifest.toml` (config echo, seed, variant, step),
//! `metrics.csv` (one row per evaluation step and budget), `gates.csv` for
//! gated schemes, `pretrain_loss.csv` for pretrained schemes, and the
//! protocol checkpoints under `checkpoints/`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::GeneratorConfig;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::metrics::MetricsRow;
use crate::orchestrator::environment_tag;
use crate::trainer::{
    load_protocol, save_protocol, train, IntentGame, ModelConfig, ProtocolParams, SchemeVariant,
    TrainConfig, TrainOutcome,
};

pub const MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.csv";
pub const GATES: &str = "gates.csv";
pub const PRETRAIN: &str = "pretrain_loss.csv";
pub const CHECKPOINTS: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub variant: SchemeVariant,
    pub seed: u64,
    pub steps: u64,
    /// Hash of the generator config.
    pub environment: String,
    pub msg_dim: usize,
    pub flops_per_decision: u64,
    pub param_count: u64,
    pub symbol_rate: f64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
}

pub fn run_dir(root: &Path, variant: SchemeVariant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(format!("seed-{seed}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        if !r.mean_kl.is_finite() || !r.mean_reward.is_finite() {
            return Err(Error::NonFinite(format!("metrics row at step {}", r.step)));
        }
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_outcome(dir: &Path, outcome: &TrainOutcome, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics(&dir.join(METRICS), &outcome.metrics)?;
    if outcome.state.params.sender.gates.is_some() {
        let mut w = create(&dir.join(GATES))?;
        let header: Vec<String> = (0..manifest.msg_dim).map(|d| format!("kappa_{d}")).collect();
        writeln!(w, "step,{}", header.join(","))?;
        for g in &outcome.gates {
            let vals: Vec<String> = g.values.iter().map(f64::to_string).collect();
            writeln!(w, "{},{}", g.step, vals.join(","))?;
        }
        w.flush()?;
    }
    if !outcome.pretrain_losses.is_empty() {
        let mut w = create(&dir.join(PRETRAIN))?;
        writeln!(w, "step,loss")?;
        for (i, l) in outcome.pretrain_losses.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        w.flush()?;
    }
    save_protocol(&dir.join(CHECKPOINTS), &outcome.state.params)?;
    let text = toml::to_string(manifest)
        .map_err(|e| Error::Config(format!("cannot serialize run manifest: {e}")))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// A finished run: its directory, manifest and training outcome.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
}

/// Trains one (variant, seed) and writes its run directory.
pub fn train_run(cfg: &RunConfig, variant: SchemeVariant, seed: u64, dir: &Path) -> Result<TrainedRun> {
    let game = cfg.game()?;
    let trainer = cfg.trainer_for(seed);
    let outcome = train(&game, &trainer, variant)?;
    let flops = game.flops_per_decision();
    let manifest = RunManifest {
        variant,
        seed,
        steps: outcome.state.step,
        environment: environment_tag(&game.generator)?,
        msg_dim: game.msg_dim(),
        flops_per_decision: flops.forward_flops,
        param_count: flops.param_count,
        symbol_rate: cfg.run.symbol_rate,
        generator: cfg.generator.clone(),
        model: cfg.model.clone(),
        trainer,
    };
    write_outcome(dir, &outcome, &manifest)?;
    Ok(TrainedRun {
        dir: dir.to_path_buf(),
        manifest,
        outcome,
    })
}

/// Trains `variants × seeds` concurrently under `root`.
pub fn train_many(
    cfg: &RunConfig,
    variants: &[SchemeVariant],
    seeds: &[u64],
    root: &Path,
) -> Result<Vec<TrainedRun>> {
    let jobs: Vec<(SchemeVariant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(v, s)| train_run(cfg, v, s, &run_dir(root, v, s)))
        .collect()
}

/// `train` command: the configured variant over every configured seed.
pub fn cmd_train(cfg: &RunConfig, root: &Path) -> Result<Vec<TrainedRun>> {
    train_many(cfg, &[cfg.run.variant], &cfg.run.seeds, root)
}

/// A run directory read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRow>,
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        reason: format!("missing run manifest ({e}); train this run first"),
    })?;
    toml::from_str(&text).map_err(|e| Error::Checkpoint {
        path,
        reason: e.to_string(),
    })
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = read_manifest(dir)?;
    let metrics = read_metrics(&dir.join(METRICS))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        metrics,
    })
}

/// Loads a run's protocol and checks it against `game`.
pub fn load_checkpoint(dir: &Path, game: &IntentGame) -> Result<(RunManifest, ProtocolParams)> {
    let manifest = read_manifest(dir)?;
    if manifest.environment != environment_tag(&game.generator)? || manifest.model != game.model {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: "run was trained with a different generator or model config".into(),
        });
    }
    let params = load_protocol(&dir.join(CHECKPOINTS))?;
    params.check(game, manifest.variant).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((manifest, params))
}
