//! Joint optimization of task losses, the bandwidth regularizer and the
//! complexity regularizer over encoder, policies and gates.
//!
//! The two-agent intent-to-resource game is wired here: the sender observes
//! traffic features, predicts the application class and emits a message; the
//! receiver observes channel state plus the message and picks a resource
//! level.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agents::{
    act, act_backward, emit_message, emit_message_backward, task_loss, task_loss_logit_grad,
    AgentParams, AgentSpec, MessageMode,
};
use crate::complexity::gaussian_kl;
use crate::envs::{
    episode_targets, resource_reward, sample_traffic_with, traffic_stream, AppClass,
    GeneratorConfig, ResourceAction, TrafficEpisode,
};
use crate::error::{Error, Result};
use crate::filter::{
    effective_dimension, importance_regularizer, importance_regularizer_grad, mask_to_bandwidth,
    truncate_to_bandwidth, BandwidthBudget, ImportanceGates,
};
use crate::metrics::MetricsRow;
use crate::nnet::{
    count_flops, mlp_backward_accumulate, mlp_forward, read_checkpoint, write_checkpoint,
    FlopReport, Layout, ParamVector,
};

pub const SENDER_ID: &str = "app-agent";
pub const RECEIVER_ID: &str = "phy-agent";

const POOL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EVAL_NOISE_SALT: u64 = 0x5eed_0f_e7a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeVariant {
    #[serde(rename = "ec-sota")]
    EcSota,
    #[serde(rename = "if")]
    If,
    #[serde(rename = "cr")]
    Cr,
    #[serde(rename = "if-cr")]
    IfCr,
}

impl SchemeVariant {
    pub const ALL: [SchemeVariant; 4] = [
        SchemeVariant::EcSota,
        SchemeVariant::If,
        SchemeVariant::Cr,
        SchemeVariant::IfCr,
    ];

    pub fn filter(self) -> bool {
        matches!(self, SchemeVariant::If | SchemeVariant::IfCr)
    }

    pub fn regularizer(self) -> bool {
        matches!(self, SchemeVariant::Cr | SchemeVariant::IfCr)
    }

    pub fn pretrain(self) -> bool {
        self == SchemeVariant::EcSota
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeVariant::EcSota => "ec-sota",
            SchemeVariant::If => "if",
            SchemeVariant::Cr => "cr",
            SchemeVariant::IfCr => "if-cr",
        }
    }
}

impl fmt::Display for SchemeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "variant: unknown scheme `{s}` (expected ec-sota, if, cr or if-cr)"
                ))
            })
    }
}

/// Receiver training signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-entropy on the reward-maximizing level.
    #[default]
    CrossEntropy,
    /// Score-function estimator on the raw reward with a batch-mean baseline.
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub msg_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            msg_dim: 8,
            hidden_width: 32,
            hidden_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the bandwidth regularizer.
    pub eps_b: f64,
    /// Weight of the complexity regularizer.
    pub eps_c: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Budgets evaluated every `eval_interval` steps; empty means
    /// `{D, D/2, D/4, D/8}`.
    pub eval_budgets: Vec<usize>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Autoencoder steps for schemes that pretrain their messages.
    pub pretrain_steps: u64,
    /// Size of the fixed training set; zero draws fresh episodes every step.
    pub train_pool: usize,
    pub objective: Objective,
    /// Message used at evaluation: the posterior mean or a seeded sample.
    pub eval_message: MessageMode,
    /// Per-pair complexity budget in nats, reported against the KL estimate.
    pub complexity_budget: f64,
    /// Per-agent multipliers replacing `eps_b`/`eps_c`, keyed by agent id.
    pub overrides: BTreeMap<String, EpsOverride>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsOverride {
    pub eps_b: Option<f64>,
    pub eps_c: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps_b: 1e-2,
            eps_c: 1e-3,
            learning_rate: 1e-3,
            batch_size: 64,
            total_steps: 20_000,
            seed: 1,
            eval_budgets: Vec::new(),
            eval_interval: 1_000,
            eval_episodes: 2_000,
            eval_seed: 0xe7a1,
            pretrain_steps: 5_000,
            train_pool: 0,
            objective: Objective::CrossEntropy,
            eval_message: MessageMode::Mean,
            complexity_budget: 4.0,
            overrides: BTreeMap::new(),
        }
    }
}

/// `{D, D/2, D/4, D/8}` without duplicates, never below one dimension.
pub fn default_budgets(msg_dim: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [1, 2, 4, 8].iter().map(|d| (msg_dim / d).max(1)).collect();
    v.dedup();
    v
}

impl TrainConfig {
    pub fn budgets(&self, msg_dim: usize) -> Vec<usize> {
        if self.eval_budgets.is_empty() {
            default_budgets(msg_dim)
        } else {
            self.eval_budgets.clone()
        }
    }

    /// `(eps_b, eps_c)` for one agent.
    pub fn eps_for(&self, agent: &str) -> (f64, f64) {
        let o = self.overrides.get(agent);
        (
            o.and_then(|o| o.eps_b).unwrap_or(self.eps_b),
            o.and_then(|o| o.eps_c).unwrap_or(self.eps_c),
        )
    }

    pub fn validate(&self, msg_dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer: {m}")));
        let nonneg = std::iter::once((self.eps_b, self.eps_c))
            .chain(self.overrides.keys().map(|k| self.eps_for(k)))
            .all(|(b, c)| b >= 0.0 && c >= 0.0);
        if !nonneg {
            return bad("eps_b and eps_c must be nonnegative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("batch_size, eval_interval and eval_episodes must be positive");
        }
        if let Some(b) = self.eval_budgets.iter().find(|&&b| b > msg_dim) {
            return Err(Error::Config(format!(
                "trainer: eval budget {b} exceeds message dimension {msg_dim}"
            )));
        }
        if !(self.complexity_budget >= 0.0) {
            return bad("complexity_budget must be nonnegative");
        }
        Ok(())
    }
}

/// Agent specs and generator of the intent-to-resource game.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentGame {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub sender: AgentSpec,
    pub receiver: AgentSpec,
    pub decoder_layout: Layout,
}

impl IntentGame {
    pub fn new(generator: GeneratorConfig, model: ModelConfig) -> Result<Self> {
        generator.validate()?;
        if model.msg_dim == 0 || model.hidden_width == 0 {
            return Err(Error::Config("model: msg_dim and hidden_width must be positive".into()));
        }
        let hidden = model.hidden();
        let sender = AgentSpec::new(
            SENDER_ID,
            generator.feature_dim(),
            model.msg_dim,
            AppClass::COUNT,
            vec![],
            &hidden,
        )?;
        let receiver = AgentSpec::new(
            RECEIVER_ID,
            generator.channel_dim,
            0,
            generator.levels,
            vec![model.msg_dim],
            &hidden,
        )?;
        let decoder_layout = Layout::mlp(model.msg_dim, &hidden, generator.feature_dim())?;
        Ok(Self {
            generator,
            model,
            sender,
            receiver,
            decoder_layout,
        })
    }

    pub fn msg_dim(&self) -> usize {
        self.model.msg_dim
    }

    /// FLOPs of one joint decision: encoder plus both policies.
    pub fn flops_per_decision(&self) -> FlopReport {
        let enc = self.sender.encoder_layout.as_ref().map(count_flops).unwrap_or_default();
        enc + count_flops(&self.sender.policy_layout) + count_flops(&self.receiver.policy_layout)
    }
}

/// Parameters of both agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub sender: AgentParams,
    pub receiver: AgentParams,
}

impl ProtocolParams {
    pub fn init<R: Rng + ?Sized>(game: &IntentGame, variant: SchemeVariant, rng: &mut R) -> Self {
        let encoder = game
            .sender
            .encoder_layout
            .clone()
            .map(|l| ParamVector::init(l, rng));
        let sender_policy = ParamVector::init(game.sender.policy_layout.clone(), rng);
        let receiver_policy = ParamVector::init(game.receiver.policy_layout.clone(), rng);
        let gates = variant
            .filter()
            .then(|| ImportanceGates::constant(game.msg_dim(), 0.0));
        Self {
            sender: AgentParams {
                encoder,
                policy: sender_policy,
                gates,
            },
            receiver: AgentParams {
                encoder: None,
                policy: receiver_policy,
                gates: None,
            },
        }
    }

    pub fn check(&self, game: &IntentGame, variant: SchemeVariant) -> Result<()> {
        game.sender.check_params(&self.sender)?;
        game.receiver.check_params(&self.receiver)?;
        if variant.filter() != self.sender.gates.is_some() {
            return Err(Error::InvalidArgument(format!(
                "scheme {variant} {} importance gates",
                if variant.filter() { "requires" } else { "does not use" }
            )));
        }
        Ok(())
    }

    fn encoder(&self) -> Result<&ParamVector> {
        self.sender
            .encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("sender has no encoder".into()))
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + Self::EPSILON);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub encoder: Adam,
    pub sender_policy: Adam,
    pub receiver_policy: Adam,
    pub gates: Option<Adam>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ProtocolParams,
    pub moments: Moments,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(game: &IntentGame, variant: SchemeVariant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ProtocolParams::init(game, variant, &mut rng);
        let moments = Moments {
            encoder: Adam::new(params.sender.encoder.as_ref().map_or(0, ParamVector::len)),
            sender_policy: Adam::new(params.sender.policy.len()),
            receiver_policy: Adam::new(params.receiver.policy.len()),
            gates: params.sender.gates.as_ref().map(|g| Adam::new(g.len())),
        };
        Self {
            params,
            moments,
            step: 0,
            rng,
        }
    }
}

/// One training example with its pre-drawn randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub episode: TrafficEpisode,
    /// Standard-normal noise for the message sample.
    pub noise: Vec<f64>,
    /// Uniform draw used to sample the receiver's action (score-function path).
    pub action_draw: f64,
}

pub fn draw_batch(
    game: &IntentGame,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    pool: &[TrafficEpisode],
) -> Vec<BatchItem> {
    (0..batch_size)
        .map(|_| {
            let episode = if pool.is_empty() {
                sample_traffic_with(rng, &game.generator)
            } else {
                pool[rng.random_range(0..pool.len())].clone()
            };
            let noise = (0..game.msg_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let action_draw = rng.random();
            BatchItem {
                episode,
                noise,
                action_draw,
            }
        })
        .collect()
}

/// Scalar parts of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean task loss over agents and batch.
    pub task: f64,
    /// `eps_b · exp(Σ κ)`; zero when the filter is off.
    pub bandwidth: f64,
    /// `eps_c · mean KL`; zero when the regularizer is off.
    pub complexity: f64,
    /// Unweighted minibatch KL estimate.
    pub mean_kl: f64,
}

/// Gradients for every parameter group; `None` for inactive groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Option<Vec<f64>>,
    pub sender_policy: Vec<f64>,
    pub receiver_policy: Vec<f64>,
    pub gates: Option<Vec<f64>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        let groups = [
            self.encoder.as_deref(),
            Some(self.sender_policy.as_slice()),
            Some(self.receiver_policy.as_slice()),
            self.gates.as_deref(),
        ];
        groups.into_iter().flatten().flatten().all(|v| v.is_finite())
    }
}

fn sample_index(probabilities: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

/// The Lagrangian objective and its gradients on one batch.
pub fn total_loss(
    game: &IntentGame,
    params: &ProtocolParams,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    variant: SchemeVariant,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let encoder = params.encoder()?;
    let gates = if variant.filter() {
        Some(params.sender.gates.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("scheme {variant} requires importance gates"))
        })?)
    } else {
        None
    };
    let mode = if variant.pretrain() {
        MessageMode::Mean
    } else {
        MessageMode::Sample
    };
    let train_encoder = !variant.pretrain();
    let (eps_b, eps_c) = cfg.eps_for(SENDER_ID);
    let kl_weight = if variant.regularizer() { eps_c / n } else { 0.0 };
    // Mean over the two agents and the batch.
    let task_scale = 1.0 / (2.0 * n);

    let mut grads = Gradients {
        encoder: train_encoder.then(|| vec![0.0; encoder.len()]),
        sender_policy: vec![0.0; params.sender.policy.len()],
        receiver_policy: vec![0.0; params.receiver.policy.len()],
        gates: gates.map(|g| vec![0.0; g.len()]),
    };

    let mut forward = Vec::with_capacity(batch.len());
    let mut task_sum = 0.0;
    let mut kl_sum = 0.0;
    for item in batch {
        let ep = &item.episode;
        let (class_target, level_target) = episode_targets(ep);
        let (msg, etrace) = emit_message(
            &game.sender,
            encoder,
            gates,
            &ep.features,
            &item.noise,
            mode,
            RECEIVER_ID,
        )?;
        kl_sum += gaussian_kl(etrace.posterior());
        let (dist_p, ptrace) = act(
            &game.receiver,
            &params.receiver.policy,
            &ep.channel_state,
            &[&msg.payload],
        )?;
        let (dist_a, atrace) = act(&game.sender, &params.sender.policy, &ep.features, &[])?;
        task_sum += task_loss(&dist_a, class_target)?;

        let (action, reward) = match cfg.objective {
            Objective::CrossEntropy => {
                task_sum += task_loss(&dist_p, level_target)?;
                (level_target, 0.0)
            }
            Objective::Reinforce => {
                let a = sample_index(dist_p.probabilities(), item.action_draw);
                let r = resource_reward(
                    ResourceAction { level: a },
                    ep.required_level,
                    game.generator.levels,
                    game.generator.waste_weight,
                );
                (a, r)
            }
        };
        forward.push((etrace, dist_p, ptrace, dist_a, atrace, class_target, action, reward));
    }

    let baseline = match cfg.objective {
        Objective::CrossEntropy => 0.0,
        Objective::Reinforce => forward.iter().map(|f| f.7).sum::<f64>() / n,
    };

    for (etrace, dist_p, ptrace, dist_a, atrace, class_target, action, reward) in &forward {
        let mut ga = task_loss_logit_grad(dist_a, *class_target);
        ga.iter_mut().for_each(|g| *g *= task_scale);
        act_backward(&game.sender, &params.sender.policy, atrace, &ga, &mut grads.sender_policy)?;

        let gp: Vec<f64> = match cfg.objective {
            Objective::CrossEntropy => task_loss_logit_grad(dist_p, *action)
                .into_iter()
                .map(|g| g * task_scale)
                .collect(),
            Objective::Reinforce => {
                let adv = reward - baseline;
                task_sum += -adv * dist_p.log_probabilities()[*action];
                // d/dlogits of −adv·ln p[a] is adv·(p − onehot(a)).
                task_loss_logit_grad(dist_p, *action)
                    .into_iter()
                    .map(|g| adv * g * task_scale)
                    .collect()
            }
        };
        let msg_grads = act_backward(
            &game.receiver,
            &params.receiver.policy,
            ptrace,
            &gp,
            &mut grads.receiver_policy,
        )?;
        if let Some(enc_grad) = grads.encoder.as_mut() {
            emit_message_backward(
                encoder,
                gates,
                etrace,
                &msg_grads[0],
                kl_weight,
                enc_grad,
                grads.gates.as_deref_mut(),
            )?;
        }
    }

    let task = task_sum * task_scale;
    let mean_kl = kl_sum / n;
    let mut bandwidth = 0.0;
    if let Some(g) = gates {
        bandwidth = eps_b * importance_regularizer(g);
        let gg = grads.gates.as_mut().expect("gate gradient allocated");
        for (acc, d) in gg.iter_mut().zip(importance_regularizer_grad(g)) {
            *acc += eps_b * d;
        }
    }
    let complexity = if variant.regularizer() {
        eps_c * mean_kl
    } else {
        0.0
    };
    let total = task + bandwidth + complexity;
    if !total.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("loss is {total} (task {task}, bandwidth {bandwidth}, complexity {complexity})"),
        });
    }
    Ok((
        LossBreakdown {
            total,
            task,
            bandwidth,
            complexity,
            mean_kl,
        },
        grads,
    ))
}

/// One Adam update on every active parameter group.
pub fn train_step(
    game: &IntentGame,
    state: &mut TrainState,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    variant: SchemeVariant,
) -> Result<LossBreakdown> {
    let (loss, grads) = total_loss(game, &state.params, batch, cfg, variant).map_err(|e| match e {
        Error::Diverged { detail, .. } => Error::Diverged {
            step: state.step + 1,
            detail,
        },
        other => other,
    })?;
    if !grads.is_finite() {
        return Err(Error::Diverged {
            step: state.step + 1,
            detail: "non-finite gradient".into(),
        });
    }
    apply_gradients(state, &grads, cfg.learning_rate);
    state.step += 1;
    Ok(loss)
}

pub fn apply_gradients(state: &mut TrainState, grads: &Gradients, lr: f64) {
    let p = &mut state.params;
    let m = &mut state.moments;
    if let (Some(g), Some(enc)) = (&grads.encoder, p.sender.encoder.as_mut()) {
        m.encoder.update(enc.values_mut(), g, lr);
    }
    m.sender_policy.update(p.sender.policy.values_mut(), &grads.sender_policy, lr);
    m.receiver_policy.update(p.receiver.policy.values_mut(), &grads.receiver_policy, lr);
    if let (Some(g), Some(gates), Some(adam)) = (&grads.gates, p.sender.gates.as_mut(), m.gates.as_mut()) {
        adam.update(gates.raw_mut(), g, lr);
    }
}

/// Trains `encoder` (mean head) and `decoder` to reconstruct samples under
/// mean-squared error. Returns the per-step batch losses.
#[allow(clippy::too_many_arguments)]
pub fn fit_autoencoder<F>(
    encoder: &mut ParamVector,
    decoder: &mut ParamVector,
    steps: u64,
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    mut sample: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    let latent = decoder.layout().input_width();
    if encoder.layout().output_width() != 2 * latent {
        return Err(Error::InvalidArgument(
            "encoder must output mean and logvar of the decoder input".into(),
        ));
    }
    let mut enc_adam = Adam::new(encoder.len());
    let mut dec_adam = Adam::new(decoder.len());
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut enc_grad = vec![0.0; encoder.len()];
        let mut dec_grad = vec![0.0; decoder.len()];
        let mut loss = 0.0;
        for _ in 0..batch_size {
            let x = sample(rng);
            let (raw, etape) = mlp_forward(encoder, &x)?;
            let (recon, dtape) = mlp_forward(decoder, &raw[..latent])?;
            let scale = 1.0 / (batch_size * x.len()) as f64;
            let g: Vec<f64> = recon
                .iter()
                .zip(&x)
                .map(|(r, t)| {
                    loss += (r - t) * (r - t) * scale;
                    2.0 * (r - t) * scale
                })
                .collect();
            let mut dz = mlp_backward_accumulate(decoder, &dtape, &g, &mut dec_grad)?;
            dz.resize(2 * latent, 0.0);
            mlp_backward_accumulate(encoder, &etape, &dz, &mut enc_grad)?;
        }
        if !loss.is_finite() || enc_grad.iter().chain(&dec_grad).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "autoencoder reconstruction diverged".into(),
            });
        }
        enc_adam.update(encoder.values_mut(), &enc_grad, lr);
        dec_adam.update(decoder.values_mut(), &dec_grad, lr);
        losses.push(loss);
    }
    Ok(losses)
}

/// Reconstruction pretraining of the sender encoder. The decoder is dropped
/// afterwards; messages are the latent means from then on.
pub fn pretrain_autoencoder(
    game: &IntentGame,
    state: &mut TrainState,
    cfg: &TrainConfig,
    pool: &[TrafficEpisode],
) -> Result<Vec<f64>> {
    if cfg.pretrain_steps == 0 {
        return Ok(Vec::new());
    }
    let mut decoder = ParamVector::init(game.decoder_layout.clone(), &mut state.rng);
    let encoder = state
        .params
        .sender
        .encoder
        .as_mut()
        .ok_or_else(|| Error::InvalidArgument("sender has no encoder".into()))?;
    let generator = &game.generator;
    fit_autoencoder(
        encoder,
        &mut decoder,
        cfg.pretrain_steps,
        cfg.batch_size,
        cfg.learning_rate,
        &mut state.rng,
        |rng| {
            if pool.is_empty() {
                sample_traffic_with(rng, generator).features
            } else {
                pool[rng.random_range(0..pool.len())].features.clone()
            }
        },
    )
}

/// Fixed evaluation episodes with their message noise.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub episodes: Vec<TrafficEpisode>,
    pub noise: Vec<Vec<f64>>,
    /// How stochastic encoders produce the transmitted message.
    pub message_mode: MessageMode,
}

impl EvalSet {
    pub fn new(game: &IntentGame, seed: u64, episodes: usize, message_mode: MessageMode) -> Result<Self> {
        let episodes = traffic_stream(seed, &game.generator, episodes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_NOISE_SALT);
        let noise = episodes
            .iter()
            .map(|_| (0..game.msg_dim()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(Self {
            episodes,
            noise,
            message_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// Aggregates of one evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub class_accuracy: f64,
    pub level_accuracy: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub effective_dim: f64,
}

/// Payload actually transmitted at `budget`.
pub fn transmitted_payload(
    game: &IntentGame,
    params: &ProtocolParams,
    variant: SchemeVariant,
    features: &[f64],
    noise: &[f64],
    mode: MessageMode,
    budget: BandwidthBudget,
) -> Result<(Vec<f64>, f64)> {
    let mode = if variant.pretrain() {
        MessageMode::Mean
    } else {
        mode
    };
    let (_, trace) = emit_message(&game.sender, params.encoder()?, None, features, noise, mode, RECEIVER_ID)?;
    let kl = gaussian_kl(trace.posterior());
    let payload = match (variant.filter(), params.sender.gates.as_ref()) {
        (true, Some(g)) => mask_to_bandwidth(trace.sample(), g, budget)?,
        (true, None) => {
            return Err(Error::InvalidArgument(format!("scheme {variant} requires importance gates")))
        }
        (false, _) => truncate_to_bandwidth(trace.sample(), budget),
    };
    Ok((payload, kl))
}

fn evaluate_with<F>(
    game: &IntentGame,
    params: &ProtocolParams,
    set: &EvalSet,
    mut payload_for: F,
) -> Result<EvalSummary>
where
    F: FnMut(&TrafficEpisode, &[f64]) -> Result<(Vec<f64>, f64)>,
{
    let mut s = EvalSummary::default();
    for (ep, noise) in set.episodes.iter().zip(&set.noise) {
        let (class_target, level_target) = episode_targets(ep);
        let (payload, kl) = payload_for(ep, noise)?;
        let (dist_p, _) = act(&game.receiver, &params.receiver.policy, &ep.channel_state, &[&payload])?;
        let (dist_a, _) = act(&game.sender, &params.sender.policy, &ep.features, &[])?;
        let level = dist_p.argmax();
        s.class_accuracy += f64::from(u8::from(dist_a.argmax() == class_target));
        s.level_accuracy += f64::from(u8::from(level == level_target));
        s.mean_reward += resource_reward(
            ResourceAction { level },
            ep.required_level,
            game.generator.levels,
            game.generator.waste_weight,
        );
        s.mean_kl += kl;
        s.effective_dim += effective_dimension(&payload) as f64;
    }
    let n = set.len().max(1) as f64;
    s.class_accuracy /= n;
    s.level_accuracy /= n;
    s.mean_reward /= n;
    s.mean_kl /= n;
    s.effective_dim /= n;
    Ok(s)
}

/// Greedy evaluation under hard masking at `budget`. Never mutates `params`.
pub fn evaluate_on(
    game: &IntentGame,
    params: &ProtocolParams,
    variant: SchemeVariant,
    set: &EvalSet,
    budget: BandwidthBudget,
) -> Result<EvalSummary> {
    params.check(game, variant)?;
    evaluate_with(game, params, set, |ep, noise| {
        transmitted_payload(game, params, variant, &ep.features, noise, set.message_mode, budget)
    })
}

/// The receiver acting on an all-zero message.
pub fn evaluate_no_communication(
    game: &IntentGame,
    params: &ProtocolParams,
    variant: SchemeVariant,
    set: &EvalSet,
) -> Result<EvalSummary> {
    params.check(game, variant)?;
    evaluate_with(game, params, set, |ep, noise| {
        let (_, kl) = transmitted_payload(
            game,
            params,
            variant,
            &ep.features,
            noise,
            set.message_mode,
            BandwidthBudget { dims: 0 },
        )?;
        Ok((vec![0.0; game.msg_dim()], kl))
    })
}

/// Builds a [`MetricsRow`] for `budget` on the config's evaluation set.
pub fn evaluate(
    game: &IntentGame,
    params: &ProtocolParams,
    cfg: &TrainConfig,
    variant: SchemeVariant,
    budget: BandwidthBudget,
    step: u64,
) -> Result<MetricsRow> {
    let set = EvalSet::new(game, cfg.eval_seed, cfg.eval_episodes, cfg.eval_message)?;
    let s = evaluate_on(game, params, variant, &set, budget)?;
    Ok(metrics_row(game, cfg, variant, budget, step, &s))
}

pub fn metrics_row(
    game: &IntentGame,
    cfg: &TrainConfig,
    variant: SchemeVariant,
    budget: BandwidthBudget,
    step: u64,
    s: &EvalSummary,
) -> MetricsRow {
    MetricsRow {
        step,
        variant,
        seed: cfg.seed,
        budget: budget.dims,
        class_accuracy: s.class_accuracy,
        level_accuracy: s.level_accuracy,
        mean_reward: s.mean_reward,
        mean_kl: s.mean_kl,
        effective_dim: s.effective_dim,
        flops_per_decision: game.flops_per_decision().forward_flops,
    }
}

/// Gate values `κ` recorded at an evaluation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub step: u64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub gates: Vec<GateSnapshot>,
    pub pretrain_losses: Vec<f64>,
}

/// The fixed training set, empty when episodes are drawn fresh.
pub fn training_pool(game: &IntentGame, cfg: &TrainConfig) -> Result<Vec<TrafficEpisode>> {
    if cfg.train_pool == 0 {
        Ok(Vec::new())
    } else {
        traffic_stream(cfg.seed ^ POOL_SALT, &game.generator, cfg.train_pool)
    }
}

/// Full seeded run: optional pretraining, `total_steps` updates, and an
/// evaluation at every budget each `eval_interval` steps.
pub fn train(game: &IntentGame, cfg: &TrainConfig, variant: SchemeVariant) -> Result<TrainOutcome> {
    cfg.validate(game.msg_dim())?;
    let mut state = TrainState::new(game, variant, cfg.seed);
    let pool = training_pool(game, cfg)?;
    let pretrain_losses = if variant.pretrain() {
        pretrain_autoencoder(game, &mut state, cfg, &pool)?
    } else {
        Vec::new()
    };
    let set = EvalSet::new(game, cfg.eval_seed, cfg.eval_episodes, cfg.eval_message)?;
    let mut metrics = Vec::new();
    let mut gates = Vec::new();
    while state.step < cfg.total_steps {
        let batch = draw_batch(game, &mut state.rng, cfg.batch_size, &pool);
        train_step(game, &mut state, &batch, cfg, variant)?;
        if state.step % cfg.eval_interval == 0 {
            for b in cfg.budgets(game.msg_dim()) {
                let budget = BandwidthBudget::new(b, game.msg_dim())?;
                let s = evaluate_on(game, &state.params, variant, &set, budget)?;
                metrics.push(metrics_row(game, cfg, variant, budget, state.step, &s));
            }
            if let Some(g) = &state.params.sender.gates {
                gates.push(GateSnapshot {
                    step: state.step,
                    values: g.values(),
                });
            }
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        gates,
        pretrain_losses,
    })
}

const CKPT_ENCODER: &str = "sender_encoder.ckpt";
const CKPT_SENDER_POLICY: &str = "sender_policy.ckpt";
const CKPT_RECEIVER_POLICY: &str = "receiver_policy.ckpt";
const CKPT_GATES: &str = "sender_gates.ckpt";

pub fn checkpoint_files(with_gates: bool) -> Vec<&'static str> {
    let mut v = vec![CKPT_ENCODER, CKPT_SENDER_POLICY, CKPT_RECEIVER_POLICY];
    if with_gates {
        v.push(CKPT_GATES);
    }
    v
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes the protocol parameters into `dir` in the flat checkpoint format.
/// Gates use a `u32` count followed by the raw values as little-endian f64.
pub fn save_protocol(dir: &Path, params: &ProtocolParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let enc = params.encoder()?;
    write_file(&dir.join(CKPT_ENCODER), |w| write_checkpoint(w, enc))?;
    write_file(&dir.join(CKPT_SENDER_POLICY), |w| write_checkpoint(w, &params.sender.policy))?;
    write_file(&dir.join(CKPT_RECEIVER_POLICY), |w| {
        write_checkpoint(w, &params.receiver.policy)
    })?;
    let gates_path = dir.join(CKPT_GATES);
    match &params.sender.gates {
        Some(g) => write_file(&gates_path, |w| {
            w.write_all(&(g.len() as u32).to_le_bytes())?;
            g.raw().iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))
        })?,
        None if gates_path.exists() => std::fs::remove_file(gates_path)?,
        None => {}
    }
    Ok(())
}

pub fn load_protocol(dir: &Path) -> Result<ProtocolParams> {
    let load = |name: &str| -> Result<ParamVector> {
        let path = dir.join(name);
        let file = File::open(&path).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        read_checkpoint(BufReader::new(file)).map_err(|e| Error::Checkpoint {
            path,
            reason: e.to_string(),
        })
    };
    let encoder = load(CKPT_ENCODER)?;
    let sender_policy = load(CKPT_SENDER_POLICY)?;
    let receiver_policy = load(CKPT_RECEIVER_POLICY)?;
    let gates_path = dir.join(CKPT_GATES);
    let gates = if gates_path.exists() {
        let mut bytes = Vec::new();
        File::open(&gates_path)?.read_to_end(&mut bytes)?;
        let bad = |reason: &str| Error::Checkpoint {
            path: gates_path.clone(),
            reason: reason.into(),
        };
        if bytes.len() < 4 {
            return Err(bad("truncated header"));
        }
        let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 4 + 8 * n {
            return Err(bad("length does not match gate count"));
        }
        let raw = bytes[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Some(ImportanceGates::new(raw)?)
    } else {
        None
    };
    Ok(ProtocolParams {
        sender: AgentParams {
            encoder: Some(encoder),
            policy: sender_policy,
            gates,
        },
        receiver: AgentParams {
            encoder: None,
            policy: receiver_policy,
            gates: None,
        },
    })
}
