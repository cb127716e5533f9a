//! Agent decision functions: a stochastic message encoder and an action policy
//! over local state plus received messages.

use serde::{Deserialize, Serialize};

use crate::complexity::gaussian_kl_grad;
use crate::error::{ensure_len, Error, Result};
use crate::filter::{gate_message, gate_message_backward, ImportanceGates};
use crate::nnet::{
    gaussian_sample, gaussian_sample_backward, mlp_backward_accumulate, mlp_forward,
    GaussianPosterior, Layout, ParamVector, Tape, LOGVAR_MAX, LOGVAR_MIN,
};

pub type AgentId = String;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    pub obs_dim: usize,
    /// Outgoing message dimension `D`; zero for agents that only listen.
    pub msg_dim: usize,
    pub action_arity: usize,
    /// Dimensions of the messages this agent receives, in input order.
    pub incoming_dims: Vec<usize>,
    pub encoder_layout: Option<Layout>,
    pub policy_layout: Layout,
}

impl AgentSpec {
    pub fn new(
        id: impl Into<AgentId>,
        obs_dim: usize,
        msg_dim: usize,
        action_arity: usize,
        incoming_dims: Vec<usize>,
        hidden: &[usize],
    ) -> Result<Self> {
        if action_arity == 0 {
            return Err(Error::InvalidArgument("action_arity must be at least 1".into()));
        }
        if obs_dim == 0 {
            return Err(Error::InvalidArgument("obs_dim must be positive".into()));
        }
        let encoder_layout = if msg_dim > 0 {
            Some(Layout::mlp(obs_dim, hidden, 2 * msg_dim)?)
        } else {
            None
        };
        let policy_in = obs_dim + incoming_dims.iter().sum::<usize>();
        let policy_layout = Layout::mlp(policy_in, hidden, action_arity)?;
        Ok(Self {
            id: id.into(),
            obs_dim,
            msg_dim,
            action_arity,
            incoming_dims,
            encoder_layout,
            policy_layout,
        })
    }

    pub fn policy_input_dim(&self) -> usize {
        self.obs_dim + self.incoming_dims.iter().sum::<usize>()
    }

    /// Checks that loaded parameters fit this agent.
    pub fn check_params(&self, params: &AgentParams) -> Result<()> {
        let mismatch = |what: &str| {
            Err(Error::InvalidArgument(format!(
                "agent `{}`: {what} does not match the agent spec",
                self.id
            )))
        };
        if params.policy.layout() != &self.policy_layout {
            return mismatch("policy layout");
        }
        match (&self.encoder_layout, &params.encoder) {
            (None, None) => {}
            (Some(l), Some(p)) if p.layout() == l => {}
            _ => return mismatch("encoder layout"),
        }
        if let Some(g) = &params.gates {
            if g.len() != self.msg_dim {
                return mismatch("gate count");
            }
        }
        Ok(())
    }
}

/// Learned parameters of one agent: encoder `ψ`, policy `φ`, gates `κ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub encoder: Option<ParamVector>,
    pub policy: ParamVector,
    pub gates: Option<ImportanceGates>,
}

/// How a payload is read off the encoder posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageMode {
    /// Reparameterized sample.
    Sample,
    /// Posterior mean (autoencoder latents).
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: AgentId,
    pub recipient: AgentId,
    pub payload: Vec<f64>,
    pub posterior: Option<GaussianPosterior>,
}

/// Forward state needed to backpropagate through [`emit_message`].
#[derive(Clone, Debug)]
pub struct EmitTrace {
    tape: Tape,
    posterior: GaussianPosterior,
    raw_logvar: Vec<f64>,
    noise: Vec<f64>,
    sample: Vec<f64>,
    mode: MessageMode,
}

impl EmitTrace {
    pub fn posterior(&self) -> &GaussianPosterior {
        &self.posterior
    }

    /// Message before gating.
    pub fn sample(&self) -> &[f64] {
        &self.sample
    }
}

pub fn emit_message(
    spec: &AgentSpec,
    encoder: &ParamVector,
    gates: Option<&ImportanceGates>,
    observation: &[f64],
    noise: &[f64],
    mode: MessageMode,
    recipient: &str,
) -> Result<(Message, EmitTrace)> {
    ensure_len("observation", spec.obs_dim, observation.len())?;
    ensure_len("encoder noise", spec.msg_dim, noise.len())?;
    if spec.encoder_layout.as_ref() != Some(encoder.layout()) {
        return Err(Error::InvalidArgument(format!(
            "agent `{}` encoder layout mismatch",
            spec.id
        )));
    }
    let (raw, tape) = mlp_forward(encoder, observation)?;
    let posterior = GaussianPosterior::from_encoder_output(&raw)?;
    let sample = match mode {
        MessageMode::Sample => gaussian_sample(&posterior, noise)?,
        MessageMode::Mean => posterior.mean().to_vec(),
    };
    let payload = match gates {
        Some(g) => gate_message(&sample, g)?,
        None => sample.clone(),
    };
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("message payload of `{}`", spec.id)));
    }
    let message = Message {
        sender: spec.id.clone(),
        recipient: recipient.to_string(),
        payload,
        posterior: Some(posterior.clone()),
    };
    Ok((
        message,
        EmitTrace {
            tape,
            posterior,
            raw_logvar: raw[spec.msg_dim..].to_vec(),
            noise: noise.to_vec(),
            sample,
            mode,
        },
    ))
}

/// Backpropagates a payload gradient, plus `kl_weight · ∇ KL(posterior ‖ N(0, I))`,
/// into the encoder (and gate) gradient accumulators.
pub fn emit_message_backward(
    encoder: &ParamVector,
    gates: Option<&ImportanceGates>,
    trace: &EmitTrace,
    payload_gradient: &[f64],
    kl_weight: f64,
    encoder_grad: &mut [f64],
    gate_grad: Option<&mut [f64]>,
) -> Result<()> {
    let sample_grad = match gates {
        Some(g) => {
            let (dm, dr) = gate_message_backward(&trace.sample, g, payload_gradient)?;
            if let Some(acc) = gate_grad {
                ensure_len("gate gradient", dr.len(), acc.len())?;
                acc.iter_mut().zip(dr).for_each(|(a, d)| *a += d);
            }
            dm
        }
        None => payload_gradient.to_vec(),
    };
    let (mut dmean, mut dlogvar) = match trace.mode {
        MessageMode::Sample => gaussian_sample_backward(&trace.posterior, &trace.noise, &sample_grad)?,
        MessageMode::Mean => (sample_grad, vec![0.0; trace.posterior.dim()]),
    };
    if kl_weight != 0.0 {
        let (km, kl) = gaussian_kl_grad(&trace.posterior);
        dmean.iter_mut().zip(km).for_each(|(d, k)| *d += kl_weight * k);
        dlogvar.iter_mut().zip(kl).for_each(|(d, k)| *d += kl_weight * k);
    }
    // The clamp has zero derivative outside its range.
    for (d, raw) in dlogvar.iter_mut().zip(&trace.raw_logvar) {
        if !(LOGVAR_MIN..=LOGVAR_MAX).contains(raw) {
            *d = 0.0;
        }
    }
    dmean.extend(dlogvar);
    mlp_backward_accumulate(encoder, &trace.tape, &dmean, encoder_grad)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    probabilities: Vec<f64>,
    log_probabilities: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_probabilities: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
        let probabilities = log_probabilities.iter().map(|l| l.exp()).collect();
        Self {
            probabilities,
            log_probabilities,
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn log_probabilities(&self) -> &[f64] {
        &self.log_probabilities
    }

    pub fn arity(&self) -> usize {
        self.probabilities.len()
    }

    /// Most likely action; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

/// Forward state needed to backpropagate through [`act`].
#[derive(Clone, Debug)]
pub struct ActTrace {
    tape: Tape,
}

pub fn act(
    spec: &AgentSpec,
    policy: &ParamVector,
    observation: &[f64],
    received: &[&[f64]],
) -> Result<(ActionDistribution, ActTrace)> {
    ensure_len("observation", spec.obs_dim, observation.len())?;
    ensure_len("received messages", spec.incoming_dims.len(), received.len())?;
    let mut input = Vec::with_capacity(spec.policy_input_dim());
    input.extend_from_slice(observation);
    for (msg, &dim) in received.iter().zip(&spec.incoming_dims) {
        ensure_len("received payload", dim, msg.len())?;
        input.extend_from_slice(msg);
    }
    let (logits, tape) = mlp_forward(policy, &input)?;
    Ok((ActionDistribution::from_logits(&logits), ActTrace { tape }))
}

/// Backpropagates a logit gradient; returns the gradients of each received
/// payload, in input order.
pub fn act_backward(
    spec: &AgentSpec,
    policy: &ParamVector,
    trace: &ActTrace,
    logit_gradient: &[f64],
    policy_grad: &mut [f64],
) -> Result<Vec<Vec<f64>>> {
    let input_grad = mlp_backward_accumulate(policy, &trace.tape, logit_gradient, policy_grad)?;
    let mut offset = spec.obs_dim;
    Ok(spec
        .incoming_dims
        .iter()
        .map(|&d| {
            let g = input_grad[offset..offset + d].to_vec();
            offset += d;
            g
        })
        .collect())
}

/// Cross-entropy `−ln p[target]`.
pub fn task_loss(dist: &ActionDistribution, target: usize) -> Result<f64> {
    dist.log_probabilities
        .get(target)
        .map(|lp| -lp)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "target {target} out of range for {} actions",
                dist.arity()
            ))
        })
}

/// Gradient of [`task_loss`] with respect to the logits: `p − onehot(target)`.
pub fn task_loss_logit_grad(dist: &ActionDistribution, target: usize) -> Vec<f64> {
    let mut g = dist.probabilities.clone();
    g[target] -= 1.0;
    g
}
