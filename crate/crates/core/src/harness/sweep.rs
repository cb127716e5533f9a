//! Sweeps over bandwidth (existing checkpoints), `eps_c` and hidden width
//! (one training run per grid point).

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::BandwidthBudget;
use crate::harness::config::{RunConfig, SweepAxis};
use crate::harness::run::{load_checkpoint, run_dir, train_run};
use crate::metrics::Spread;
use crate::trainer::{default_budgets, evaluate_on, EvalSet, EvalSummary, IntentGame, SchemeVariant};

/// One (variant, seed, grid value) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: SchemeVariant,
    pub seed: u64,
    pub value: f64,
    pub class_accuracy: f64,
    pub level_accuracy: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub effective_dim: f64,
    pub flops_per_decision: u64,
}

/// Level accuracy over seeds for one (variant, grid value).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variant: SchemeVariant,
    pub value: f64,
    pub seeds: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub median_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    pub dir: PathBuf,
}

impl SweepResult {
    pub fn summary_for(&self, variant: SchemeVariant, value: f64) -> Option<&SweepSummary> {
        self.summary
            .iter()
            .find(|s| s.variant == variant && s.value == value)
    }
}

pub const SWEEP_RUNS: &str = "sweep_runs.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

fn row(variant: SchemeVariant, seed: u64, value: f64, game: &IntentGame, s: &EvalSummary) -> SweepRow {
    SweepRow {
        variant,
        seed,
        value,
        class_accuracy: s.class_accuracy,
        level_accuracy: s.level_accuracy,
        mean_reward: s.mean_reward,
        mean_kl: s.mean_kl,
        effective_dim: s.effective_dim,
        flops_per_decision: game.flops_per_decision().forward_flops,
    }
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Runs the configured sweep. Bandwidth sweeps read the checkpoints of
/// `train` runs under `root`; the other axes train one run per point under
/// `root/sweep-<axis>/<value>/`.
pub fn cmd_sweep(cfg: &RunConfig, root: &Path) -> Result<SweepResult> {
    let spec = &cfg.sweep;
    let base = cfg.game()?;
    spec.validate(base.msg_dim())?;
    let grid: Vec<f64> = if spec.grid.is_empty() {
        cfg.trainer
            .budgets(base.msg_dim())
            .into_iter()
            .map(|b| b as f64)
            .collect()
    } else {
        spec.grid.clone()
    };
    let out = root.join(format!("sweep-{}", spec.axis.name()));
    let seeds = &cfg.run.seeds;

    let rows: Vec<SweepRow> = match spec.axis {
        SweepAxis::Bandwidth => {
            let set = EvalSet::new(&base, cfg.trainer.eval_seed, spec.episodes, cfg.trainer.eval_message)?;
            let jobs: Vec<(SchemeVariant, u64)> = spec
                .variants
                .iter()
                .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
                .collect();
            let per_run: Vec<Vec<SweepRow>> = jobs
                .par_iter()
                .map(|&(v, seed)| {
                    let (manifest, params) = load_checkpoint(&run_dir(root, v, seed), &base)?;
                    grid.iter()
                        .map(|&b| {
                            let budget = BandwidthBudget::new(b as usize, base.msg_dim())?;
                            let s = evaluate_on(&base, &params, manifest.variant, &set, budget)?;
                            Ok(row(v, seed, b, &base, &s))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            per_run.into_iter().flatten().collect()
        }
        SweepAxis::EpsC | SweepAxis::HiddenWidth => {
            let jobs: Vec<(f64, SchemeVariant, u64)> = grid
                .iter()
                .flat_map(|&g| {
                    spec.variants
                        .iter()
                        .flat_map(move |&v| seeds.iter().map(move |&s| (g, v, s)))
                })
                .collect();
            jobs.par_iter()
                .map(|&(value, v, seed)| {
                    let mut point = cfg.clone();
                    match spec.axis {
                        SweepAxis::EpsC => point.trainer.eps_c = value,
                        _ => point.model.hidden_width = value as usize,
                    }
                    let game = point.game()?;
                    let dir = run_dir(&out.join(format_value(value)), v, seed);
                    let run = train_run(&point, v, seed, &dir)?;
                    let set = EvalSet::new(&game, point.trainer.eval_seed, spec.episodes, point.trainer.eval_message)?;
                    let budget = BandwidthBudget::unlimited(game.msg_dim());
                    let s = evaluate_on(&game, &run.outcome.state.params, v, &set, budget)?;
                    Ok(row(v, seed, value, &game, &s))
                })
                .collect::<Result<_>>()?
        }
    };

    let mut summary = Vec::new();
    for &v in &spec.variants {
        for &g in &grid {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.variant == v && r.value == g).collect();
            let acc: Vec<f64> = sel.iter().map(|r| r.level_accuracy).collect();
            let kl: Vec<f64> = sel.iter().map(|r| r.mean_kl).collect();
            let (Some(spread), Some(kl)) = (Spread::of(&acc), Spread::of(&kl)) else {
                return Err(Error::InvalidArgument(format!("no sweep rows for {v} at {g}")));
            };
            summary.push(SweepSummary {
                variant: v,
                value: g,
                seeds: sel.len(),
                median: spread.median,
                q25: spread.q25,
                q75: spread.q75,
                median_kl: kl.median,
            });
        }
    }

    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_RUNS))?;
    rows.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_SUMMARY))?;
    summary.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;

    Ok(SweepResult {
        axis: spec.axis,
        rows,
        summary,
        dir: out,
    })
}

/// The standard `{D, D/2, D/4, D/8}` bandwidth grid as sweep values.
pub fn halving_grid(msg_dim: usize) -> Vec<f64> {
    default_budgets(msg_dim).into_iter().map(|b| b as f64).collect()
}
