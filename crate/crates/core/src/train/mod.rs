//! PPO with generalized advantage estimation.
//!
//! Rollouts are collected in parallel from a frozen snapshot of the policy.
//! The stochastic policy is a Gaussian around the diffusion head's
//! eval-mode mean with a learned state-independent log-std; the diffusion
//! noise of every step is fixed by a stored seed so log-probabilities can
//! be recomputed exactly.
//!
//! Rewards come from [`crate::env::reward`]; substituting a learned reward
//! model there is the hook for preference-based fine-tuning.

pub mod critic;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{CrowdEnv, EnvError, Observation, ScenarioConfig, Termination, Vec2};
use crate::policy::{gaussian_log_prob, gaussian_log_prob_value, HamiltonianPolicy, PolicyError};
use crate::tensor::{save_checkpoint, AdamConfig, Checkpoint, CheckpointError, Tape, Tensor, Var};

pub use critic::Critic;

pub const METRICS_HEADER: &str =
    "update\tepisodes\tmean_return\tsuccess_rate\tcollision_rate\tactor_loss\tcritic_loss\tfirst_ratio_dev\tstd_x\tstd_y";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("length mismatch: {rewards} rewards, {values} values")]
    Length { rewards: usize, values: usize },
    #[error("non-finite {what} at update {update}; last good checkpoint: {last_good:?}")]
    NonFinite {
        what: &'static str,
        update: usize,
        last_good: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Episodes collected in parallel per update.
    pub workers: usize,
    pub episodes: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Checkpoint every this many updates; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub critic_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            workers: 16,
            episodes: 2000,
            learning_rate: 4e-5,
            critic_learning_rate: 1e-3,
            max_grad_norm: 1.0,
            seed: 0,
            checkpoint_every: 10,
            critic_width: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip {} outside (0, 1)", self.clip));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.workers == 0 || self.critic_width == 0 {
            return bad("epochs, minibatch, workers and critic width must be positive".into());
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("critic learning rate", self.critic_learning_rate),
            ("max grad norm", self.max_grad_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            max_grad_norm: Some(self.max_grad_norm),
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f64>,
    /// `A_t + V(s_t)`.
    pub targets: Vec<f64>,
}

/// Advantages of one episode segment. `bootstrap` is `V` of the state
/// after the last step, zero when the episode terminated.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Result<Gae, TrainError> {
    if rewards.len() != values.len() {
        return Err(TrainError::Length {
            rewards: rewards.len(),
            values: values.len(),
        });
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
        next_value = values[t];
    }
    let targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(Gae { advantages, targets })
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`, negated.
pub fn clipped_surrogate_value(ratio: f64, advantage: f64, clip: f64) -> f64 {
    -(ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Tape version of [`clipped_surrogate_value`] with `ρ = exp(log π − log π_old)`.
pub fn clipped_surrogate<'t>(log_prob: Var<'t>, old_log_prob: f64, advantage: f64, clip: f64) -> Var<'t> {
    let ratio = log_prob.add_scalar(-old_log_prob).exp();
    let unclipped = ratio.scale(advantage);
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip).scale(advantage);
    -unclipped.minimum(clipped)
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Observations up to and including the current one, at most the
    /// policy's window long.
    pub history: Vec<Observation>,
    pub action: Vec2,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub termination: Termination,
    pub total_reward: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<Range<usize>>,
    /// Value after each episode's last step, zero if it terminated.
    pub bootstraps: Vec<f64>,
    pub summaries: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn push_episode(&mut self, steps: Vec<StepRecord>, bootstrap: f64, summary: EpisodeSummary) {
        let start = self.steps.len();
        self.steps.extend(steps);
        self.episodes.push(start..self.steps.len());
        self.bootstraps.push(bootstrap);
        self.summaries.push(summary);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Per-step advantages and value targets, episode by episode.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<Gae, TrainError> {
        let mut out = Gae {
            advantages: Vec::with_capacity(self.len()),
            targets: Vec::with_capacity(self.len()),
        };
        for (range, &boot) in self.episodes.iter().zip(&self.bootstraps) {
            let s = &self.steps[range.clone()];
            let r: Vec<f64> = s.iter().map(|x| x.reward).collect();
            let v: Vec<f64> = s.iter().map(|x| x.value).collect();
            let g = gae(&r, &v, boot, gamma, lambda)?;
            out.advantages.extend(g.advantages);
            out.targets.extend(g.targets);
        }
        Ok(out)
    }
}

/// SplitMix64 finalizer over a pair, for deriving per-episode seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn trimmed(history: &[Observation], window: usize) -> Vec<Observation> {
    history[history.len().saturating_sub(window)..].to_vec()
}

/// One stochastic episode under a frozen policy snapshot.
pub fn collect_episode(
    policy: &HamiltonianPolicy,
    critic: &Critic,
    env: &CrowdEnv,
    seed: u64,
) -> Result<(Vec<StepRecord>, f64, EpisodeSummary), TrainError> {
    let window = policy.config.encoder.window;
    let (mut state, obs) = env.reset(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let std = policy.std();
    let mut history = vec![obs];
    let mut steps = Vec::new();
    let mut total = 0.0;
    loop {
        let noise_seed = mix_seed(seed, 2 + state.steps as u64);
        let mean = policy.mean_action(&history, noise_seed)?;
        let action = [
            mean[0] + std[0] * rng.sample::<f64, _>(StandardNormal),
            mean[1] + std[1] * rng.sample::<f64, _>(StandardNormal),
        ];
        let log_prob = gaussian_log_prob_value(mean, std, action);
        let value = critic.value(history.last().expect("non-empty history"));
        let (outcome, next) = env.step(&state, action)?;
        total += outcome.reward;
        steps.push(StepRecord {
            history: trimmed(&history, window),
            action,
            reward: outcome.reward,
            value,
            log_prob,
            done: outcome.done.is_done(),
            noise_seed,
        });
        history.push(outcome.observation);
        if history.len() > window {
            history.remove(0);
        }
        state = next;
        if outcome.done.is_done() {
            let bootstrap = if outcome.done == Termination::Timeout {
                critic.value(history.last().expect("non-empty history"))
            } else {
                0.0
            };
            let summary = EpisodeSummary {
                seed,
                termination: outcome.done,
                total_reward: total,
                steps: steps.len(),
            };
            return Ok((steps, bootstrap, summary));
        }
    }
}

/// Collects the given episode seeds in parallel; the buffer is ordered by
/// seed position, independent of scheduling.
pub fn collect(policy: &HamiltonianPolicy, critic: &Critic, env: &CrowdEnv, seeds: &[u64]) -> Result<RolloutBuffer, TrainError> {
    let episodes: Vec<_> = seeds
        .par_iter()
        .map(|&s| collect_episode(policy, critic, env, s))
        .collect::<Result<_, _>>()?;
    let mut buffer = RolloutBuffer::default();
    for (steps, boot, summary) in episodes {
        buffer.push_episode(steps, boot, summary);
    }
    Ok(buffer)
}

/// Log-probability of a stored action under the current parameters.
pub fn log_prob_on_tape<'t>(tape: &'t Tape, policy: &HamiltonianPolicy, step: &StepRecord) -> Result<Var<'t>, TrainError> {
    let window = policy.window(&step.history)?;
    let out = policy.forward(tape, &window, &policy.noise(step.noise_seed))?;
    let log_std = tape.param(&policy.store, policy.log_std);
    Ok(gaussian_log_prob(out.mean, log_std, step.action))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Largest `|ρ − 1|` in the batch.
    pub max_ratio_deviation: f64,
}

/// Mean clipped-surrogate loss over `batch`; adds its gradient to the
/// policy's parameter store.
pub fn ppo_actor_loss(
    policy: &mut HamiltonianPolicy,
    steps: &[StepRecord],
    advantages: &[f64],
    batch: &[usize],
    clip: f64,
) -> Result<LossReport, TrainError> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut dev: f64 = 0.0;
    for &i in batch {
        let tape = Tape::new();
        let step = &steps[i];
        let lp = log_prob_on_tape(&tape, policy, step)?;
        let ratio = (lp.item() - step.log_prob).exp();
        if !ratio.is_finite() {
            log::warn!("non-finite ratio for step {i}: log π = {}, old = {}", lp.item(), step.log_prob);
            return Err(TrainError::NonFinite {
                what: "probability ratio",
                update: 0,
                last_good: None,
            });
        }
        dev = dev.max((ratio - 1.0).abs());
        let l = clipped_surrogate(lp, step.log_prob, advantages[i], clip).scale(scale);
        loss += l.item();
        tape.backward(l).expect("scalar loss").accumulate_into(&mut policy.store);
    }
    Ok(LossReport {
        loss,
        max_ratio_deviation: dev,
    })
}

/// Mean squared error to the value targets; adds its gradient to the
/// critic's store.
pub fn critic_loss(critic: &mut Critic, steps: &[StepRecord], targets: &[f64], batch: &[usize]) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let tape = Tape::new();
        let v = critic.forward(&tape, steps[i].history.last().expect("non-empty history"));
        let target = tape.constant(Tensor::from_raw(vec![1, 1], vec![targets[i]]));
        let l = (v - target).square().sum().scale(scale);
        loss += l.item();
        tape.backward(l).expect("scalar loss").accumulate_into(&mut critic.store);
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMetrics {
    pub update: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Largest `|ρ − 1|` on the first minibatch of the update.
    pub first_ratio_deviation: f64,
    pub std: Vec2,
}

impl UpdateMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.4}\t{:.4}\t{:.6e}\t{:.6e}\t{:.3e}\t{:.6}\t{:.6}",
            self.update,
            self.episodes,
            self.mean_return,
            self.success_rate,
            self.collision_rate,
            self.actor_loss,
            self.critic_loss,
            self.first_ratio_deviation,
            self.std[0],
            self.std[1]
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: HamiltonianPolicy,
    pub critic: Critic,
    pub metrics: Vec<UpdateMetrics>,
    /// Every collected episode in order.
    pub episodes: Vec<EpisodeSummary>,
}

/// Where checkpoints and the metrics log go.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn policy(&self) -> PathBuf {
        self.dir.join("policy.ckpt")
    }

    pub fn critic(&self) -> PathBuf {
        self.dir.join("critic.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }
}

/// TOML header recorded in checkpoints.
pub fn run_metadata(config: &TrainConfig, scenario: &ScenarioConfig) -> String {
    let mut s = String::new();
    writeln!(s, "# train config\n{}", toml::to_string(config).expect("train config serializes")).expect("string write");
    writeln!(s, "# scenario config\n{}", scenario.to_toml()).expect("string write");
    s
}

fn save_all(paths: &OutputPaths, policy: &HamiltonianPolicy, critic: &Critic, meta: &str) -> Result<(), TrainError> {
    save_checkpoint(&paths.policy(), &policy.to_checkpoint(meta))?;
    let c = Checkpoint {
        metadata: meta.to_string(),
        tensors: critic.store.named_values(),
    };
    save_checkpoint(&paths.critic(), &c)?;
    Ok(())
}

/// Runs PPO for `config.episodes` episodes. With `out`, writes the
/// metrics log as it goes and checkpoints on the configured interval and
/// at the end. A non-finite loss aborts without touching the last
/// checkpoint.
pub fn train(
    config: &TrainConfig,
    scenario: &ScenarioConfig,
    mut policy: HamiltonianPolicy,
    out: Option<&OutputPaths>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let env = CrowdEnv::new(scenario.clone())?;
    let mut critic = Critic::new(mix_seed(config.seed, 0xc0), config.critic_width);
    let meta = run_metadata(config, scenario);
    let mut log = match out {
        Some(p) => {
            fs::create_dir_all(&p.dir)?;
            let mut f = fs::File::create(p.metrics())?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let mut metrics = Vec::new();
    let mut episodes = Vec::new();
    let mut shuffle = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5u64));
    let actor_adam = config.adam(config.learning_rate);
    let critic_adam = config.adam(config.critic_learning_rate);

    let mut done = 0;
    let mut update = 0;
    while done < config.episodes {
        let count = config.workers.min(config.episodes - done);
        let seeds: Vec<u64> = (done..done + count).map(|e| mix_seed(config.seed, e as u64 + 1000)).collect();
        let buffer = collect(&policy, &critic, &env, &seeds)?;
        let gae = buffer.advantages(config.gamma, config.lambda)?;
        let adv = normalized(&gae.advantages);

        let mut actor_loss = 0.0;
        let mut critic_loss_total = 0.0;
        let mut batches = 0usize;
        let mut first_dev = f64::NAN;
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut shuffle);
            for batch in order.chunks(config.minibatch) {
                let report = ppo_actor_loss(&mut policy, &buffer.steps, &adv, batch, config.clip).map_err(|e| match e {
                    TrainError::NonFinite { what, .. } => TrainError::NonFinite {
                        what,
                        update,
                        last_good: last_good.clone(),
                    },
                    other => other,
                })?;
                if first_dev.is_nan() {
                    first_dev = report.max_ratio_deviation;
                }
                let c_loss = critic_loss(&mut critic, &buffer.steps, &gae.targets, batch);
                if !report.loss.is_finite() || !c_loss.is_finite() || !policy.store.grad_norm().is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "loss",
                        update,
                        last_good,
                    });
                }
                policy.store.adam_step(&actor_adam);
                critic.store.adam_step(&critic_adam);
                actor_loss += report.loss;
                critic_loss_total += c_loss;
                batches += 1;
            }
        }
        done += count;
        let n = buffer.summaries.len() as f64;
        let frac = |t: Termination| 100.0 * buffer.summaries.iter().filter(|s| s.termination == t).count() as f64 / n;
        let m = UpdateMetrics {
            update,
            episodes: done,
            mean_return: buffer.summaries.iter().map(|s| s.total_reward).sum::<f64>() / n,
            success_rate: frac(Termination::Success),
            collision_rate: frac(Termination::Collision),
            actor_loss: actor_loss / batches.max(1) as f64,
            critic_loss: critic_loss_total / batches.max(1) as f64,
            first_ratio_deviation: first_dev,
            std: policy.std(),
        };
        log::info!("{}", m.to_line());
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.to_line())?;
            f.flush()?;
        }
        metrics.push(m);
        episodes.extend(buffer.summaries);
        update += 1;
        if let Some(p) = out {
            if config.checkpoint_every > 0 && update % config.checkpoint_every == 0 {
                save_all(p, &policy, &critic, &meta)?;
                last_good = Some(p.policy());
            }
        }
    }
    if let Some(p) = out {
        save_all(p, &policy, &critic, &meta)?;
    }
    Ok(TrainOutcome {
        policy,
        critic,
        metrics,
        episodes,
    })
}

/// Zero mean, unit standard deviation; constant inputs map to zeros.
pub fn normalized(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Loads a checkpoint written by [`train`].
pub fn load_policy(path: &Path) -> Result<HamiltonianPolicy, TrainError> {
    let ckpt = crate::tensor::load_checkpoint(path)?;
    Ok(HamiltonianPolicy::from_checkpoint(&ckpt)?)
}
