//! Task environments.
//!
//! The intent-to-resource game pairs a traffic-sensing sender, which observes
//! synthetic per-slot traffic statistics of one of five application classes,
//! with a resource-allocating receiver that observes channel state and must
//! pick the resource level the application needs. A small referential
//! (discrimination) game is provided as well.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `Φ⁻¹(2/3)`: the upper tercile point of a standard normal.
const TERCILE_Z: f64 = 0.430_727_299_295_457_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AppClass {
    LiveStream,
    LongVideo,
    Conference,
    Gaming,
    GameStream,
}

impl AppClass {
    pub const ALL: [AppClass; 5] = [
        AppClass::LiveStream,
        AppClass::LongVideo,
        AppClass::Conference,
        AppClass::Gaming,
        AppClass::GameStream,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AppClass::LiveStream => "live-stream",
            AppClass::LongVideo => "long-video",
            AppClass::Conference => "conference",
            AppClass::Gaming => "gaming",
            AppClass::GameStream => "game-stream",
        }
    }
}

impl fmt::Display for AppClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic traffic and channel generator.
///
/// Features are `cluster_means[class] + noise_scale ⊙ e`, where `e` is a
/// stationary unit-variance AR(1) sequence along the feature index. Channel
/// state entries are i.i.d. `N(channel_mean, channel_std²)`; the mean entry
/// decides the channel-quality tercile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub class_priors: Vec<f64>,
    pub cluster_means: Vec<Vec<f64>>,
    pub noise_scale: Vec<f64>,
    pub ar_coeff: f64,
    pub channel_dim: usize,
    pub channel_mean: f64,
    pub channel_std: f64,
    pub levels: usize,
    pub base_levels: Vec<usize>,
    pub waste_weight: f64,
}

pub const DEFAULT_FEATURE_DIM: usize = 12;
const SIGNAL_DIMS: usize = AppClass::COUNT;

impl Default for GeneratorConfig {
    fn default() -> Self {
        // One discriminative slot per class; the remaining slots carry
        // class-independent, higher-variance traffic fluctuation.
        let separation = 2.0;
        let cluster_means = (0..AppClass::COUNT)
            .map(|k| {
                (0..DEFAULT_FEATURE_DIM)
                    .map(|d| if d == k { separation } else { 0.0 })
                    .collect()
            })
            .collect();
        let noise_scale = (0..DEFAULT_FEATURE_DIM)
            .map(|d| if d < SIGNAL_DIMS { 0.4 } else { 3.0 })
            .collect();
        Self {
            class_priors: vec![0.2; AppClass::COUNT],
            cluster_means,
            noise_scale,
            ar_coeff: 0.7,
            channel_dim: 6,
            channel_mean: 0.0,
            channel_std: 1.0,
            levels: 8,
            base_levels: vec![4, 3, 2, 5, 6],
            waste_weight: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn feature_dim(&self) -> usize {
        self.noise_scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.class_priors.len() != AppClass::COUNT {
            return bad(format!("class_priors needs {} entries", AppClass::COUNT));
        }
        if self.class_priors.iter().any(|p| !(*p >= 0.0)) {
            return bad("class_priors must be nonnegative".into());
        }
        if (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class_priors must sum to 1".into());
        }
        let dim = self.feature_dim();
        if dim == 0 {
            return bad("noise_scale must be nonempty".into());
        }
        if self.noise_scale.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise_scale must be nonnegative".into());
        }
        if self.cluster_means.len() != AppClass::COUNT
            || self.cluster_means.iter().any(|m| m.len() != dim)
        {
            return bad(format!(
                "cluster_means must be {} rows of {dim} values",
                AppClass::COUNT
            ));
        }
        if self.cluster_means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("cluster_means must be finite".into());
        }
        if !(self.ar_coeff > -1.0 && self.ar_coeff < 1.0) {
            return bad("ar_coeff must lie in (-1, 1)".into());
        }
        if self.channel_dim == 0 || !(self.channel_std >= 0.0) || !self.channel_mean.is_finite() {
            return bad("channel_dim must be positive and channel_std nonnegative".into());
        }
        if self.levels < 2 {
            return bad("at least two resource levels are required".into());
        }
        if self.base_levels.len() != AppClass::COUNT
            || self.base_levels.iter().any(|&l| l >= self.levels)
        {
            return bad(format!(
                "base_levels needs {} entries below {}",
                AppClass::COUNT,
                self.levels
            ));
        }
        if !(self.waste_weight > 0.0 && self.waste_weight < 1.0) {
            return bad("waste_weight must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Channel-quality thresholds separating the lower, middle and upper terciles.
    pub fn quality_thresholds(&self) -> (f64, f64) {
        let sd = self.channel_std / (self.channel_dim as f64).sqrt();
        (
            self.channel_mean - TERCILE_Z * sd,
            self.channel_mean + TERCILE_Z * sd,
        )
    }

    pub fn required_level(&self, class: AppClass, channel_state: &[f64]) -> usize {
        let quality = channel_state.iter().sum::<f64>() / channel_state.len() as f64;
        let (lo, hi) = self.quality_thresholds();
        let base = self.base_levels[class.index()] as i64;
        let adjusted = if quality < lo {
            base + 1
        } else if quality > hi {
            base - 1
        } else {
            base
        };
        adjusted.clamp(0, self.levels as i64 - 1) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficEpisode {
    pub app_class: AppClass,
    pub features: Vec<f64>,
    pub channel_state: Vec<f64>,
    pub required_level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceAction {
    pub level: usize,
}

/// Draws one episode from `rng`. The config must already be validated.
pub fn sample_traffic_with<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig) -> TrafficEpisode {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut class = AppClass::ALL[AppClass::COUNT - 1];
    for (k, p) in cfg.class_priors.iter().enumerate() {
        acc += p;
        if u < acc {
            class = AppClass::ALL[k];
            break;
        }
    }

    let a = cfg.ar_coeff;
    let innovation = (1.0 - a * a).sqrt();
    let mut e = 0.0;
    let features = cfg.cluster_means[class.index()]
        .iter()
        .zip(&cfg.noise_scale)
        .enumerate()
        .map(|(t, (m, s))| {
            let z: f64 = rng.sample(StandardNormal);
            e = if t == 0 { z } else { a * e + innovation * z };
            m + s * e
        })
        .collect();

    let channel_state: Vec<f64> = (0..cfg.channel_dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            cfg.channel_mean + cfg.channel_std * z
        })
        .collect();
    let required_level = cfg.required_level(class, &channel_state);
    TrafficEpisode {
        app_class: class,
        features,
        channel_state,
        required_level,
    }
}

pub fn sample_traffic_episode(seed: u64, cfg: &GeneratorConfig) -> Result<TrafficEpisode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_traffic_with(&mut rng, cfg))
}

/// `n` episodes drawn sequentially from one seeded stream.
pub fn traffic_stream(seed: u64, cfg: &GeneratorConfig, n: usize) -> Result<Vec<TrafficEpisode>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample_traffic_with(&mut rng, cfg)).collect())
}

/// Zero on under-allocation, otherwise `1 − λ_w (level − required)/(L − 1)`.
pub fn resource_reward(action: ResourceAction, required_level: usize, levels: usize, waste_weight: f64) -> f64 {
    debug_assert!(levels >= 2);
    if action.level < required_level {
        0.0
    } else {
        let over = (action.level - required_level) as f64;
        1.0 - waste_weight * over / (levels - 1) as f64
    }
}

/// `(class target, resource-level target)`; the level target is the unique
/// reward-maximizing action.
pub fn episode_targets(episode: &TrafficEpisode) -> (usize, usize) {
    (episode.app_class.index(), episode.required_level)
}

/// Writes `class,features...,channel_state...,required_level` per line.
pub fn write_episode_dump<W: Write>(mut w: W, episodes: &[TrafficEpisode]) -> std::io::Result<()> {
    for ep in episodes {
        let mut fields = vec![ep.app_class.index().to_string()];
        fields.extend(ep.features.iter().map(f64::to_string));
        fields.extend(ep.channel_state.iter().map(f64::to_string));
        fields.push(ep.required_level.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn read_episode_dump<R: BufRead>(r: R, feature_dim: usize, channel_dim: usize) -> Result<Vec<TrafficEpisode>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: &str| Error::InvalidArgument(format!("episode dump line {}: {m}", n + 1));
        if fields.len() != feature_dim + channel_dim + 2 {
            return Err(bad("wrong field count"));
        }
        let class = fields[0]
            .parse::<usize>()
            .ok()
            .and_then(AppClass::from_index)
            .ok_or_else(|| bad("bad class index"))?;
        let nums = |s: &[&str]| -> Result<Vec<f64>> {
            s.iter()
                .map(|t| f64::from_str(t).map_err(|_| bad("bad number")))
                .collect()
        };
        let features = nums(&fields[1..1 + feature_dim])?;
        let channel_state = nums(&fields[1 + feature_dim..1 + feature_dim + channel_dim])?;
        let required_level = fields[fields.len() - 1]
            .parse()
            .map_err(|_| bad("bad level"))?;
        out.push(TrafficEpisode {
            app_class: class,
            features,
            channel_state,
            required_level,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferentialEpisode {
    pub candidates: Vec<Vec<u8>>,
    pub target_index: usize,
}

/// `k` distinct random binary-attribute objects and a uniform target.
pub fn sample_referential_episode(seed: u64, k: usize, object_dim: usize) -> Result<ReferentialEpisode> {
    if k < 2 {
        return Err(Error::InvalidArgument("a referential game needs K >= 2".into()));
    }
    let distinct = if object_dim >= 63 { u64::MAX } else { 1u64 << object_dim };
    if k as u64 > distinct {
        return Err(Error::InvalidArgument(format!(
            "{k} distinct objects requested but only {distinct} exist in dimension {object_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(k);
    let mut candidates = Vec::with_capacity(k);
    while candidates.len() < k {
        let obj: Vec<u8> = (0..object_dim).map(|_| rng.random_range(0..2u8)).collect();
        if seen.insert(obj.clone()) {
            candidates.push(obj);
        }
    }
    let target_index = rng.random_range(0..k);
    Ok(ReferentialEpisode {
        candidates,
        target_index,
    })
}
