//! Scripted orchestrator scenario: each configured intent runs the full
//! cognition → selection → protocol lookup/emergence → execution pass
//! against a registry directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filter::BandwidthBudget;
use crate::harness::config::RunConfig;
use crate::orchestrator::{Cognition, Emerged, ProtocolKey, ProtocolRegistry, Workflow};
use crate::trainer::{evaluate_on, train, EvalSet, IntentGame};

pub const SCENARIO_MANIFEST: &str = "scenario.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLine {
    pub request_id: String,
    pub goal: String,
    pub solo: bool,
    pub agents: Vec<String>,
    /// Registry directory of the protocol used, if any.
    pub protocol: Option<String>,
    pub cache_hit: bool,
    pub level_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub trainer_invocations: u64,
    pub executions: usize,
    pub outcomes: Vec<OutcomeLine>,
}

fn emerge(cfg: &RunConfig, game: &IntentGame, episodes: &EvalSet, _key: &ProtocolKey) -> Result<Emerged> {
    let variant = cfg.run.variant;
    let trainer = cfg.trainer_for(cfg.run.seeds[0]);
    let outcome = train(game, &trainer, variant)?;
    let eval = evaluate_on(
        game,
        &outcome.state.params,
        variant,
        episodes,
        BandwidthBudget::unlimited(game.msg_dim()),
    )?;
    Ok(Emerged {
        steps: outcome.state.step,
        params: outcome.state.params,
        variant,
        model: cfg.model.clone(),
        eval,
    })
}

/// Handles every configured intent in order and writes `scenario.toml`
/// next to the registry records.
pub fn run_scenario(cfg: &RunConfig, registry_root: &Path) -> Result<ScenarioReport> {
    let game = cfg.game()?;
    let catalog = cfg.orchestrator.catalog()?;
    let skills = cfg.orchestrator.skills()?;
    let protocols = ProtocolRegistry::open(registry_root)?;
    let episodes = EvalSet::new(
        &game,
        cfg.trainer.eval_seed,
        cfg.trainer.eval_episodes,
        cfg.trainer.eval_message,
    )?;
    let budget = BandwidthBudget::new(
        cfg.orchestrator.budget.unwrap_or(game.msg_dim()),
        game.msg_dim(),
    )?;
    let workflow = Workflow {
        catalog: &catalog,
        skills: &skills,
        protocols: &protocols,
        game: &game,
        episodes: &episodes,
        budget,
    };

    let mut outcomes = Vec::new();
    for intent in &cfg.orchestrator.intents {
        let o = workflow.handle(intent, |key| emerge(cfg, &game, &episodes, key))?;
        outcomes.push(OutcomeLine {
            request_id: o.request_id.clone(),
            goal: intent.semantic_goal.clone(),
            solo: o.cognition == Cognition::Solo,
            agents: o.plan.agents(),
            protocol: o.protocol.as_ref().map(|(r, _)| r.key.slug()),
            cache_hit: o.protocol.as_ref().is_some_and(|(_, hit)| *hit),
            level_accuracy: o.metrics.map(|m| m.level_accuracy),
        });
    }
    let report = ScenarioReport {
        trainer_invocations: protocols.trainer_invocations(),
        executions: outcomes.iter().filter(|o| o.level_accuracy.is_some()).count(),
        outcomes,
    };
    let text = toml::to_string(&report)
        .map_err(|e| crate::error::Error::Config(format!("cannot serialize scenario report: {e}")))?;
    std::fs::write(registry_root.join(SCENARIO_MANIFEST), text)?;
    Ok(report)
}
