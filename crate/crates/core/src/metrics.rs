//! Evaluation records and the summary statistics used to aggregate them.

use serde::{Deserialize, Serialize};

use crate::trainer::SchemeVariant;

/// One evaluation of a protocol at one bandwidth budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub variant: SchemeVariant,
    pub seed: u64,
    pub budget: usize,
    pub class_accuracy: f64,
    pub level_accuracy: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub effective_dim: f64,
    pub flops_per_decision: u64,
}

impl MetricsRow {
    pub fn is_valid(&self, msg_dim: usize) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.class_accuracy)
            && unit(self.level_accuracy)
            && self.mean_reward.is_finite()
            && self.mean_kl.is_finite()
            && self.mean_kl >= 0.0
            && self.effective_dim <= msg_dim as f64
    }
}

/// Linear-interpolation quantile of unsorted data; `None` when empty.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Median and interquartile range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            median: quantile(values, 0.5)?,
            q25: quantile(values, 0.25)?,
            q75: quantile(values, 0.75)?,
        })
    }
}
