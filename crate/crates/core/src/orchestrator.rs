//! Intent handling: goal cognition, sub-task assignment, protocol reuse
//! through a persistent registry, and execution of stored protocols.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::GeneratorConfig;
use crate::error::{Error, Result};
use crate::filter::BandwidthBudget;
use crate::trainer::{
    evaluate_on, load_protocol, save_protocol, EvalSet, EvalSummary, IntentGame, ModelConfig,
    ProtocolParams, SchemeVariant,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentRecord {
    pub request_id: String,
    pub semantic_goal: String,
    pub originating_agent: String,
}

/// Goal tag → required skill tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalCatalog {
    goals: BTreeMap<String, BTreeSet<String>>,
}

impl Default for GoalCatalog {
    fn default() -> Self {
        let both = || ["phy-alloc", "traffic-sense"].map(String::from).into();
        Self {
            goals: BTreeMap::from([
                ("high-res-video".to_string(), both()),
                ("low-latency-stream".to_string(), both()),
                ("traffic-report".to_string(), ["traffic-sense".to_string()].into()),
            ]),
        }
    }
}

impl GoalCatalog {
    pub fn new(goals: BTreeMap<String, BTreeSet<String>>) -> Result<Self> {
        if let Some((g, _)) = goals.iter().find(|(_, s)| s.is_empty()) {
            return Err(Error::Config(format!("orchestrator: goal `{g}` requires no skills")));
        }
        Ok(Self { goals })
    }

    pub fn required(&self, goal: &str) -> Result<&BTreeSet<String>> {
        self.goals
            .get(goal)
            .ok_or_else(|| Error::UnknownGoal(goal.to_string()))
    }

    pub fn goals(&self) -> impl Iterator<Item = &str> {
        self.goals.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cognition {
    Solo,
    NeedsCollaboration(BTreeSet<String>),
}

/// Decides whether the local skills cover the goal; otherwise names the gap.
pub fn cognize(
    request: &IntentRecord,
    catalog: &GoalCatalog,
    local_skills: &BTreeSet<String>,
) -> Result<Cognition> {
    let required = catalog.required(&request.semantic_goal)?;
    let missing: BTreeSet<String> = required.difference(local_skills).cloned().collect();
    Ok(if missing.is_empty() {
        Cognition::Solo
    } else {
        Cognition::NeedsCollaboration(missing)
    })
}

/// Agent id → skill tags.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillRegistry {
    agents: BTreeMap<String, BTreeSet<String>>,
}

impl SkillRegistry {
    pub fn new(agents: BTreeMap<String, BTreeSet<String>>) -> Result<Self> {
        let mut reg = Self::default();
        for (id, skills) in agents {
            reg.register(id, skills)?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, id: impl Into<String>, skills: BTreeSet<String>) -> Result<()> {
        let id = id.into();
        if skills.is_empty() {
            return Err(Error::Config(format!("orchestrator: agent `{id}` has no skills")));
        }
        self.agents.insert(id, skills);
        Ok(())
    }

    pub fn skills(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.agents.get(id)
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub skill: String,
    pub agent: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTaskPlan {
    pub intent: String,
    pub sub_tasks: Vec<SubTask>,
    /// Skill tags no registered agent holds.
    pub missing: Vec<String>,
}

impl SubTaskPlan {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    /// Distinct assigned agents in id order.
    pub fn agents(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.sub_tasks.iter().map(|t| &t.agent).collect();
        set.into_iter().cloned().collect()
    }
}

/// Assigns each skill tag to the smallest agent id holding it.
pub fn select_agents(
    intent: &str,
    requirements: &BTreeSet<String>,
    registry: &SkillRegistry,
) -> Result<SubTaskPlan> {
    if registry.is_empty() {
        return Err(Error::InvalidArgument("skill registry is empty".into()));
    }
    let mut sub_tasks = Vec::new();
    let mut missing = Vec::new();
    for skill in requirements {
        // BTreeMap iterates in id order, so the first holder is the smallest id.
        match registry.agents.iter().find(|(_, s)| s.contains(skill)) {
            Some((id, _)) => sub_tasks.push(SubTask {
                skill: skill.clone(),
                agent: id.clone(),
            }),
            None => missing.push(skill.clone()),
        }
    }
    Ok(SubTaskPlan {
        intent: intent.to_string(),
        sub_tasks,
        missing,
    })
}

/// SHA-256 of the serialized generator config.
pub fn environment_tag(generator: &GeneratorConfig) -> Result<String> {
    let text = toml::to_string(generator)
        .map_err(|e| Error::Config(format!("generator: cannot serialize: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolKey {
    pub task: String,
    pub environment: String,
    pub agents: Vec<String>,
}

impl ProtocolKey {
    /// Directory name of the record: a hash of the key fields.
    pub fn slug(&self) -> String {
        let mut h = Sha256::new();
        for part in std::iter::once(&self.task)
            .chain(std::iter::once(&self.environment))
            .chain(&self.agents)
        {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(&h.finalize()[..12])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolRecord {
    pub key: ProtocolKey,
    pub variant: SchemeVariant,
    pub model: ModelConfig,
    /// Training steps completed when the protocol was stored.
    pub created_at_step: u64,
    /// Checkpoint directory relative to the registry root.
    pub checkpoints: String,
    pub eval: EvalSummary,
}

/// What a trainer hook hands back for a registry miss.
#[derive(Clone, Debug)]
pub struct Emerged {
    pub params: ProtocolParams,
    pub variant: SchemeVariant,
    pub model: ModelConfig,
    pub steps: u64,
    pub eval: EvalSummary,
}

const MANIFEST: &str = "manifest.toml";

/// Directory-backed store of emerged protocols, one subdirectory per key.
#[derive(Debug)]
pub struct ProtocolRegistry {
    root: PathBuf,
    key_locks: Mutex<HashMap<ProtocolKey, Arc<Mutex<()>>>>,
    trainer_invocations: AtomicU64,
}

impl ProtocolRegistry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            key_locks: Mutex::new(HashMap::new()),
            trainer_invocations: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Trainer runs started by this handle.
    pub fn trainer_invocations(&self) -> u64 {
        self.trainer_invocations.load(Ordering::SeqCst)
    }

    pub fn manifest_path(&self, key: &ProtocolKey) -> PathBuf {
        self.root.join(key.slug()).join(MANIFEST)
    }

    pub fn get(&self, key: &ProtocolKey) -> Result<Option<ProtocolRecord>> {
        let path = self.manifest_path(key);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let record: ProtocolRecord = toml::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if &record.key != key {
            return Err(Error::Checkpoint {
                path,
                reason: "manifest key does not match its location".into(),
            });
        }
        Ok(Some(record))
    }

    /// Returns the stored record for `key`, or runs `emerge` once, stores its
    /// result and returns it. The flag is true on a cache hit. Concurrent
    /// callers for the same key wait for the first run.
    pub fn lookup_or_emerge<F>(&self, key: &ProtocolKey, emerge: F) -> Result<(ProtocolRecord, bool)>
    where
        F: FnOnce(&ProtocolKey) -> Result<Emerged>,
    {
        let lock = {
            let mut locks = self.key_locks.lock().expect("registry lock poisoned");
            Arc::clone(locks.entry(key.clone()).or_default())
        };
        let _guard = lock.lock().expect("key lock poisoned");
        if let Some(record) = self.get(key)? {
            return Ok((record, true));
        }
        self.trainer_invocations.fetch_add(1, Ordering::SeqCst);
        let emerged = emerge(key)?;
        let record = self.store(key, &emerged)?;
        Ok((record, false))
    }

    fn store(&self, key: &ProtocolKey, emerged: &Emerged) -> Result<ProtocolRecord> {
        let slug = key.slug();
        let dir = self.root.join(&slug);
        let ckpt = dir.join("checkpoints");
        let record = ProtocolRecord {
            key: key.clone(),
            variant: emerged.variant,
            model: emerged.model.clone(),
            created_at_step: emerged.steps,
            checkpoints: format!("{slug}/checkpoints"),
            eval: emerged.eval,
        };
        let written = (|| -> Result<()> {
            save_protocol(&ckpt, &emerged.params)?;
            let text = toml::to_string(&record)
                .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
            // The manifest appears last and atomically; its presence marks a
            // complete record.
            let tmp = dir.join("manifest.toml.tmp");
            fs::write(&tmp, text)?;
            fs::rename(&tmp, dir.join(MANIFEST))?;
            Ok(())
        })();
        if let Err(e) = written {
            let _ = fs::remove_dir_all(&dir);
            return Err(e);
        }
        Ok(record)
    }

    pub fn load_params(&self, record: &ProtocolRecord) -> Result<ProtocolParams> {
        load_protocol(&self.root.join(&record.checkpoints))
    }
}

/// Runs a stored protocol on `episodes` without learning. The record must
/// match the game's environment and model before any episode runs.
pub fn execute(
    registry: &ProtocolRegistry,
    record: &ProtocolRecord,
    game: &IntentGame,
    episodes: &EvalSet,
    budget: BandwidthBudget,
) -> Result<EvalSummary> {
    if record.key.environment != environment_tag(&game.generator)? {
        return Err(Error::InvalidArgument(
            "protocol was emerged in a different environment".into(),
        ));
    }
    if record.model != game.model {
        return Err(Error::InvalidArgument(
            "protocol model config does not match the game".into(),
        ));
    }
    let params = registry.load_params(record)?;
    params.check(game, record.variant)?;
    evaluate_on(game, &params, record.variant, episodes, budget)
}

/// Everything one pass of the workflow produced for a request.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentOutcome {
    pub request_id: String,
    pub cognition: Cognition,
    pub plan: SubTaskPlan,
    /// Stored protocol and whether it came from the registry.
    pub protocol: Option<(ProtocolRecord, bool)>,
    pub metrics: Option<EvalSummary>,
}

/// Static context shared by every request.
pub struct Workflow<'a> {
    pub catalog: &'a GoalCatalog,
    pub skills: &'a SkillRegistry,
    pub protocols: &'a ProtocolRegistry,
    pub game: &'a IntentGame,
    pub episodes: &'a EvalSet,
    pub budget: BandwidthBudget,
}

impl Workflow<'_> {
    /// Cognition, agent selection, then protocol lookup (or emergence) and
    /// execution. Solo requests need no protocol.
    pub fn handle<F>(&self, request: &IntentRecord, emerge: F) -> Result<IntentOutcome>
    where
        F: FnOnce(&ProtocolKey) -> Result<Emerged>,
    {
        let local = self
            .skills
            .skills(&request.originating_agent)
            .cloned()
            .unwrap_or_default();
        let cognition = cognize(request, self.catalog, &local)?;
        let required = self.catalog.required(&request.semantic_goal)?;
        let plan = select_agents(&request.request_id, required, self.skills)?;
        if !plan.is_complete() {
            return Err(Error::InvalidArgument(format!(
                "request `{}`: no agent offers {}",
                request.request_id,
                plan.missing.join(", ")
            )));
        }
        if cognition == Cognition::Solo {
            return Ok(IntentOutcome {
                request_id: request.request_id.clone(),
                cognition,
                plan,
                protocol: None,
                metrics: None,
            });
        }
        let key = ProtocolKey {
            task: request.semantic_goal.clone(),
            environment: environment_tag(&self.game.generator)?,
            agents: plan.agents(),
        };
        let (record, hit) = self.protocols.lookup_or_emerge(&key, emerge)?;
        let metrics = execute(self.protocols, &record, self.game, self.episodes, self.budget)?;
        Ok(IntentOutcome {
            request_id: request.request_id.clone(),
            cognition,
            plan,
            protocol: Some((record, hit)),
            metrics: Some(metrics),
        })
    }
}
