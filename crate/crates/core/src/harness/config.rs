//! Run configuration: one TOML file with a section per module.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::GeneratorConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{GoalCatalog, IntentRecord, SkillRegistry};
use crate::trainer::{IntentGame, ModelConfig, SchemeVariant, TrainConfig, RECEIVER_ID, SENDER_ID};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub run: RunSection,
    pub orchestrator: OrchestratorSection,
    pub sweep: SweepSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub variant: SchemeVariant,
    pub seeds: Vec<u64>,
    /// Output root; the `EMCOMM_OUT` environment variable or `runs` when unset.
    pub out: Option<PathBuf>,
    /// bps carried by one message dimension, for axis labels only.
    pub symbol_rate: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            variant: SchemeVariant::IfCr,
            seeds: vec![1],
            out: None,
            symbol_rate: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestratorSection {
    pub goals: BTreeMap<String, BTreeSet<String>>,
    pub agents: BTreeMap<String, BTreeSet<String>>,
    pub intents: Vec<IntentRecord>,
    /// Bandwidth budget for executions; full width when unset.
    pub budget: Option<usize>,
}

impl Default for OrchestratorSection {
    fn default() -> Self {
        let both: BTreeSet<String> = ["phy-alloc", "traffic-sense"].map(String::from).into();
        let intent = |id: &str, goal: &str| IntentRecord {
            request_id: id.into(),
            semantic_goal: goal.into(),
            originating_agent: SENDER_ID.into(),
        };
        Self {
            goals: BTreeMap::from([
                ("high-res-video".into(), both.clone()),
                ("low-latency-stream".into(), both),
            ]),
            agents: BTreeMap::from([
                (SENDER_ID.into(), ["traffic-sense".to_string()].into()),
                (RECEIVER_ID.into(), ["phy-alloc".to_string()].into()),
            ]),
            intents: vec![
                intent("req-1", "low-latency-stream"),
                intent("req-2", "high-res-video"),
                intent("req-3", "low-latency-stream"),
            ],
            budget: None,
        }
    }
}

impl OrchestratorSection {
    pub fn catalog(&self) -> Result<GoalCatalog> {
        GoalCatalog::new(self.goals.clone())
    }

    pub fn skills(&self) -> Result<SkillRegistry> {
        SkillRegistry::new(self.agents.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Bandwidth,
    EpsC,
    HiddenWidth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::EpsC => "eps-c",
            SweepAxis::HiddenWidth => "hidden-width",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            "eps-c" => Ok(SweepAxis::EpsC),
            "hidden-width" => Ok(SweepAxis::HiddenWidth),
            _ => Err(Error::Config(format!(
                "sweep: unknown axis `{s}` (expected bandwidth, eps-c or hidden-width)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Grid values; an empty bandwidth grid means the trainer's eval budgets.
    pub grid: Vec<f64>,
    /// Evaluation episodes per grid point.
    pub episodes: usize,
    pub variants: Vec<SchemeVariant>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Bandwidth,
            grid: Vec::new(),
            episodes: 2_000,
            variants: SchemeVariant::ALL.to_vec(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self, msg_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sweep: {m}")));
        if self.grid.is_empty() && self.axis != SweepAxis::Bandwidth {
            return bad("grid must not be empty".into());
        }
        if self.variants.is_empty() {
            return bad("variants must not be empty".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        for &v in &self.grid {
            let integral = v >= 0.0 && v.fract() == 0.0;
            match self.axis {
                SweepAxis::Bandwidth if !integral || v > msg_dim as f64 => {
                    return bad(format!("bandwidth {v} is not an integer in [0, {msg_dim}]"));
                }
                SweepAxis::HiddenWidth if !integral || v < 1.0 => {
                    return bad(format!("hidden width {v} is not a positive integer"));
                }
                SweepAxis::EpsC if !(v >= 0.0 && v.is_finite()) => {
                    return bad(format!("eps_c {v} must be finite and nonnegative"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let game = self.game()?;
        self.trainer.validate(game.msg_dim())?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run: seeds must not be empty".into()));
        }
        if !(self.run.symbol_rate > 0.0) {
            return Err(Error::Config("run: symbol_rate must be positive".into()));
        }
        self.orchestrator.catalog()?;
        self.orchestrator.skills()?;
        if let Some(b) = self.orchestrator.budget {
            if b > game.msg_dim() {
                return Err(Error::Config(format!(
                    "orchestrator: budget {b} exceeds message dimension {}",
                    game.msg_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn game(&self) -> Result<IntentGame> {
        IntentGame::new(self.generator.clone(), self.model.clone())
    }

    /// Output root: `[run] out`, else `$EMCOMM_OUT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.run
            .out
            .clone()
            .or_else(|| std::env::var_os("EMCOMM_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Trainer settings for one seed.
    pub fn trainer_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.trainer.clone()
        }
    }
}
