//! Plot-data tables built from run directories.
//!
//! Every table is tab separated with a header row. `x` columns are the step,
//! the bandwidth budget, or the FLOPs per decision; accuracy columns are the
//! median and quartiles of level accuracy over the runs of one variant.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::run::{load_run, LoadedRun};
use crate::metrics::{MetricsRow, Spread};
use crate::trainer::SchemeVariant;

pub const CONVERGENCE: &str = "convergence.tsv";
pub const ACCURACY_VS_BANDWIDTH: &str = "accuracy_vs_bandwidth.tsv";
pub const ACCURACY_VS_FLOPS: &str = "accuracy_vs_flops.tsv";

fn final_rows(run: &LoadedRun) -> impl Iterator<Item = &MetricsRow> {
    let last = run.metrics.iter().map(|m| m.step).max().unwrap_or(0);
    run.metrics.iter().filter(move |m| m.step == last)
}

fn push_spread(out: &mut String, prefix: &str, values: &[f64]) {
    if let Some(s) = Spread::of(values) {
        let _ = writeln!(out, "{prefix}\t{:.6}\t{:.6}\t{:.6}", s.median, s.q25, s.q75);
    }
}

/// Builds the three tables; `(file name, contents)` pairs.
pub fn build_tables(runs: &[LoadedRun]) -> Result<Vec<(&'static str, String)>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no run directories given".into()))?;
    for r in runs {
        let m = &r.manifest;
        if m.environment != first.manifest.environment
            || m.msg_dim != first.manifest.msg_dim
            || m.symbol_rate != first.manifest.symbol_rate
        {
            return Err(Error::Config(format!(
                "{} was produced under a different generator, message width or symbol rate than {}",
                r.dir.display(),
                first.dir.display()
            )));
        }
    }
    let full = first.manifest.msg_dim;
    let rate = first.manifest.symbol_rate;

    let mut convergence: BTreeMap<(SchemeVariant, u64), Vec<f64>> = BTreeMap::new();
    let mut bandwidth: BTreeMap<(SchemeVariant, usize), Vec<f64>> = BTreeMap::new();
    let mut flops: BTreeMap<(SchemeVariant, u64), Vec<f64>> = BTreeMap::new();
    for r in runs {
        for m in r.metrics.iter().filter(|m| m.budget == full) {
            convergence.entry((m.variant, m.step)).or_default().push(m.level_accuracy);
        }
        for m in final_rows(r) {
            bandwidth.entry((m.variant, m.budget)).or_default().push(m.level_accuracy);
            if m.budget == full {
                flops.entry((m.variant, m.flops_per_decision)).or_default().push(m.level_accuracy);
            }
        }
    }

    let mut conv = String::from("variant\tstep\tmedian\tq25\tq75\n");
    for ((v, step), vals) in &convergence {
        push_spread(&mut conv, &format!("{v}\t{step}"), vals);
    }
    let mut bw = String::from("variant\tbudget\tbps\tmedian\tq25\tq75\n");
    for ((v, b), vals) in &bandwidth {
        push_spread(&mut bw, &format!("{v}\t{b}\t{}", *b as f64 * rate), vals);
    }
    let mut fl = String::from("variant\tflops\tmflops\tmedian\tq25\tq75\n");
    for ((v, f), vals) in &flops {
        push_spread(&mut fl, &format!("{v}\t{f}\t{:.6}", *f as f64 / 1e6), vals);
    }
    Ok(vec![
        (CONVERGENCE, conv),
        (ACCURACY_VS_BANDWIDTH, bw),
        (ACCURACY_VS_FLOPS, fl),
    ])
}

/// Reads run directories and writes the tables into `out`.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let tables = build_tables(&runs)?;
    std::fs::create_dir_all(out)?;
    tables
        .into_iter()
        .map(|(name, text)| {
            let path = out.join(name);
            std::fs::write(&path, text)?;
            Ok(path)
        })
        .collect()
}
