//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use emcomm::envs::GeneratorConfig;
use emcomm::harness::RunConfig;
use emcomm::nnet::GaussianPosterior;
use emcomm::trainer::{
    draw_batch, total_loss, Gradients, IntentGame, ModelConfig, Objective, ProtocolParams, SchemeVariant, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Default generator with a 2-dim message and 3 hidden units: 175 parameters
/// with gates.
pub fn tiny_game() -> IntentGame {
    IntentGame::new(
        GeneratorConfig::default(),
        ModelConfig {
            msg_dim: 2,
            hidden_width: 3,
            hidden_layers: 1,
        },
    )
    .unwrap()
}

pub fn param_total(params: &ProtocolParams) -> usize {
    params.sender.encoder.as_ref().map_or(0, |e| e.len())
        + params.sender.policy.len()
        + params.receiver.policy.len()
        + params.sender.gates.as_ref().map_or(0, |g| g.len())
}

fn group_mut(params: &mut ProtocolParams, group: usize) -> Option<&mut [f64]> {
    match group {
        0 => params.sender.encoder.as_mut().map(|e| e.values_mut()),
        1 => Some(params.sender.policy.values_mut()),
        2 => Some(params.receiver.policy.values_mut()),
        _ => params.sender.gates.as_mut().map(|g| g.raw_mut()),
    }
}

fn group_grad(grads: &Gradients, group: usize) -> Option<&[f64]> {
    match group {
        0 => grads.encoder.as_deref(),
        1 => Some(&grads.sender_policy),
        2 => Some(&grads.receiver_policy),
        _ => grads.gates.as_deref(),
    }
}

/// The variant and objective exercised by finite-difference case `case`.
pub fn fd_case(case: u64) -> (SchemeVariant, Objective) {
    let variant = SchemeVariant::ALL[(case % 4) as usize];
    let objective = if (case / 4) % 2 == 0 {
        Objective::CrossEntropy
    } else {
        Objective::Reinforce
    };
    (variant, objective)
}

/// Worst relative error between the analytic gradient of `total_loss` and
/// central differences over every trainable parameter, for one seeded case.
pub fn total_loss_fd_error(case: u64) -> f64 {
    let game = tiny_game();
    let (variant, objective) = fd_case(case);
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let mut params = ProtocolParams::init(&game, variant, &mut rng);
    if let Some(g) = params.sender.gates.as_mut() {
        g.raw_mut().iter_mut().for_each(|r| *r = rng.random_range(-2.0..2.0));
    }
    assert!(param_total(&params) <= 200);
    let cfg = TrainConfig {
        eps_b: 0.1,
        eps_c: 0.5,
        objective,
        ..TrainConfig::default()
    };
    let batch = draw_batch(&game, &mut rng, 4, &[]);
    let (_, grads) = total_loss(&game, &params, &batch, &cfg, variant).unwrap();
    let loss = |p: &ProtocolParams| total_loss(&game, p, &batch, &cfg, variant).unwrap().0.total;

    let mut worst: f64 = 0.0;
    for group in 0..4 {
        let Some(analytic) = group_grad(&grads, group).map(<[f64]>::to_vec) else {
            continue;
        };
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            group_mut(&mut plus, group).unwrap()[i] += FD_STEP;
            let mut minus = params.clone();
            group_mut(&mut minus, group).unwrap()[i] -= FD_STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, fd));
        }
    }
    worst
}

/// A configuration that trains in well under a second.
pub fn smoke_config(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        msg_dim: 4,
        hidden_width: 8,
        hidden_layers: 1,
    };
    cfg.trainer.total_steps = steps;
    cfg.trainer.eval_interval = steps / 2;
    cfg.trainer.eval_episodes = 200;
    cfg.trainer.pretrain_steps = 50;
    cfg.trainer.batch_size = 16;
    cfg
}

pub fn random_posterior(rng: &mut ChaCha8Rng) -> GaussianPosterior {
    let d = rng.random_range(1..5);
    let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logvar = (0..d).map(|_| rng.random_range(-2.0..1.5)).collect();
    GaussianPosterior::new(mean, logvar).unwrap()
}

fn log_density(x: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(logvar)
        .map(|((x, m), lv)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp()))
        .sum()
}

/// Monte-Carlo estimate of `E_p[ln p(c) − ln N(c; 0, I)]` and its standard
/// error, sampling directly from `post`.
pub fn kl_monte_carlo(post: &GaussianPosterior, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let zeros = vec![0.0; post.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let x: Vec<f64> = post
            .mean()
            .iter()
            .zip(post.logvar())
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = log_density(&x, post.mean(), post.logvar()) - log_density(&x, &zeros, &zeros);
        sum += v;
        sum_sq += v * v;
    }
    let est = sum / n as f64;
    (est, ((sum_sq / n as f64 - est * est) / n as f64).sqrt())
}
