//! Proximal policy optimization for the update decision.
//!
//! The actor maps an [`MdpState`] to two logits (keep, update); the critic
//! maps it to a scalar value. Both are separate tanh networks. Training in
//! the simulated environment runs collect → GAE → clipped-surrogate update
//! until the step budget is spent ([`train_static`]). During deployment,
//! [`DynamicPpo`] keeps learning from real transitions every `B` steps.

use std::collections::VecDeque;
use std::f64::consts::SQRT_2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{self, DecisionContext, EpisodeConfig, EpisodeTrace, Environment, Fitter};
use crate::neural::{ActionDistribution, Adam, AdamConfig, Mlp};
use crate::rng::SimRng;
use crate::{Action, Batch, Error, LogisticModel, MdpState, Result, UpdateStrategy};

const HIDDEN_GAIN: f64 = SQRT_2;
const ACTOR_OUTPUT_GAIN: f64 = 0.01;
const CRITIC_OUTPUT_GAIN: f64 = 1.0;
const ADVANTAGE_EPS: f64 = 1e-8;
/// Completed episodes kept for the reward curve.
const EPISODE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    /// `B`: environment steps per rollout.
    pub rollout_len: usize,
    /// `G`: mini-batch size, at most `B`.
    pub minibatch_size: usize,
    /// `K`: passes over each rollout.
    pub epochs: usize,
    pub clip_range: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: Option<f64>,
    pub hidden_sizes: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            rollout_len: 2048,
            minibatch_size: 64,
            epochs: 10,
            clip_range: 0.2,
            gamma: 0.8,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.0,
            learning_rate: 3e-4,
            max_grad_norm: Some(0.5),
            hidden_sizes: vec![64, 64],
        }
    }
}

impl PpoConfig {
    /// Settings for updating on deployment transitions.
    pub fn dynamic_default() -> Self {
        PpoConfig {
            rollout_len: 32,
            minibatch_size: 16,
            epochs: 10,
            learning_rate: 1e-4,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.rollout_len == 0 {
            return fail("rollout length must be at least 1");
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.rollout_len {
            return fail("mini-batch size must lie in 1..=rollout length");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.clip_range > 0.0) {
            return fail("clip range must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gamma and lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return fail("loss coefficients must be non-negative");
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0)) {
            return fail("gradient clip must be positive");
        }
        if self.hidden_sizes.contains(&0) {
            return fail("hidden layer sizes must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }
}

/// How a trained actor turns probabilities into actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActMode {
    /// Sample from the softmax, as during training.
    Probabilistic,
    /// Update iff `P(update) > threshold`.
    Deterministic { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Mlp,
    pub critic: Mlp,
}

impl Policy {
    /// Fresh actor and critic with orthogonal initialization; the actor's
    /// output layer is scaled so the initial policy is near uniform.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let dims = |out: usize| {
            let mut d = vec![state_dim];
            d.extend_from_slice(hidden);
            d.push(out);
            d
        };
        let actor = Mlp::orthogonal(&dims(2), HIDDEN_GAIN, ACTOR_OUTPUT_GAIN, rng)?;
        let critic = Mlp::orthogonal(&dims(1), HIDDEN_GAIN, CRITIC_OUTPUT_GAIN, rng)?;
        Policy::from_parts(actor, critic)
    }

    pub fn from_parts(actor: Mlp, critic: Mlp) -> Result<Self> {
        if actor.output_dim() != 2 || critic.output_dim() != 1 {
            return Err(Error::Config("actor needs 2 outputs and critic 1".into()));
        }
        if actor.input_dim() != critic.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: actor.input_dim(),
                got: critic.input_dim(),
            });
        }
        Ok(Policy { actor, critic })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn distribution(&self, state: &MdpState) -> Result<ActionDistribution> {
        Ok(ActionDistribution::from_logits(&self.actor.forward(state.as_slice())?))
    }

    pub fn update_probability(&self, state: &MdpState) -> Result<f64> {
        Ok(self.distribution(state)?.probs[Action::Update.index()])
    }

    pub fn value(&self, state: &MdpState) -> Result<f64> {
        Ok(self.critic.forward(state.as_slice())?[0])
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &MdpState, mode: ActMode, rng: &mut R) -> Result<Action> {
        let dist = self.distribution(state)?;
        Ok(choose(&dist, mode, rng))
    }

    /// Actor checkpoint followed by critic checkpoint, see
    /// [`Mlp::write_to`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.actor
            .write_to(&mut w)
            .and_then(|_| self.critic.write_to(&mut w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let actor = Mlp::read_from(&mut r)?;
        let critic = Mlp::read_from(&mut r)?;
        Policy::from_parts(actor, critic)
    }
}

/// One uniform draw per probabilistic decision, none when deterministic.
fn choose<R: Rng + ?Sized>(dist: &ActionDistribution, mode: ActMode, rng: &mut R) -> Action {
    let p = dist.probs[Action::Update.index()];
    let update = match mode {
        ActMode::Probabilistic => rng.random::<f64>() < p,
        ActMode::Deterministic { threshold } => p > threshold,
    };
    if update {
        Action::Update
    } else {
        Action::Keep
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: MdpState,
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    transitions: Vec<Transition>,
    /// Critic value of the state following the last transition; 0 if that
    /// transition ended its episode.
    bootstrap_value: f64,
    advantages: Option<Vec<f64>>,
    returns: Option<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn new(transitions: Vec<Transition>, bootstrap_value: f64) -> Self {
        RolloutBuffer {
            transitions,
            bootstrap_value,
            advantages: None,
            returns: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn bootstrap_value(&self) -> f64 {
        self.bootstrap_value
    }

    pub fn advantages(&self) -> Option<&[f64]> {
        self.advantages.as_deref()
    }

    pub fn returns(&self) -> Option<&[f64]> {
        self.returns.as_deref()
    }

    pub fn is_finalized(&self) -> bool {
        self.advantages.is_some()
    }

    /// Compute advantages and returns. Allowed once.
    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.is_finalized() {
            return Err(Error::AlreadyFinalized);
        }
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda, self.bootstrap_value);
        self.advantages = Some(adv);
        self.returns = Some(ret);
        Ok(())
    }
}

/// Generalized advantage estimates and returns (`Â + V`) for a contiguous
/// rollout. `values[t + 1]` is taken as `V(s_{t+1})` unless `dones[t]`;
/// `bootstrap_value` plays that role after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "rollout columns differ in length");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Episode statistics over the most recent completed episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_episode_reward: f64,
    pub mean_episode_length: f64,
}

/// Rollout collection that carries the environment's current episode over
/// from one rollout to the next.
#[derive(Debug, Clone, Default)]
pub struct RolloutCollector {
    state: Option<MdpState>,
    running_reward: f64,
    running_len: usize,
    recent: VecDeque<(f64, usize)>,
}

impl RolloutCollector {
    pub fn new() -> Self {
        RolloutCollector::default()
    }

    pub fn collect<E, R>(&mut self, env: &mut E, policy: &Policy, len: usize, rng: &mut R) -> Result<RolloutBuffer>
    where
        E: Environment + ?Sized,
        R: Rng + ?Sized,
    {
        if len == 0 {
            return Err(Error::Config("rollout length must be at least 1".into()));
        }
        let mut transitions = Vec::with_capacity(len);
        for _ in 0..len {
            let state = match self.state.take() {
                Some(s) => s,
                None => env.reset()?,
            };
            let dist = policy.distribution(&state)?;
            let value = policy.value(&state)?;
            let action = choose(&dist, ActMode::Probabilistic, rng);
            let step = env.step(action)?;
            self.running_reward += step.reward;
            self.running_len += 1;
            if step.done {
                if self.recent.len() == EPISODE_WINDOW {
                    self.recent.pop_front();
                }
                self.recent.push_back((self.running_reward, self.running_len));
                self.running_reward = 0.0;
                self.running_len = 0;
            }
            transitions.push(Transition {
                state,
                action,
                log_prob: dist.log_probs[action.index()],
                reward: step.reward,
                value,
                done: step.done,
            });
            self.state = if step.done { None } else { step.next_state };
        }
        let bootstrap = match &self.state {
            Some(s) => policy.value(s)?,
            None => 0.0,
        };
        Ok(RolloutBuffer::new(transitions, bootstrap))
    }

    /// Mean reward and length over the last completed episodes, or the
    /// episode in progress if none has completed yet.
    pub fn episode_summary(&self) -> (f64, f64) {
        if self.recent.is_empty() {
            return (self.running_reward, self.running_len as f64);
        }
        let n = self.recent.len() as f64;
        let reward = self.recent.iter().map(|e| e.0).sum::<f64>() / n;
        let len = self.recent.iter().map(|e| e.1 as f64).sum::<f64>() / n;
        (reward, len)
    }
}

/// Collect `len` steps starting from a fresh episode.
pub fn collect_rollout<E, R>(env: &mut E, policy: &Policy, len: usize, rng: &mut R) -> Result<RolloutBuffer>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    RolloutCollector::new().collect(env, policy, len, rng)
}

/// Adam states for actor and critic.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    actor: Adam,
    critic: Adam,
}

impl PpoOptimizer {
    pub fn new(policy: &Policy, config: &PpoConfig) -> Self {
        PpoOptimizer {
            actor: Adam::new(&policy.actor, config.adam()),
            critic: Adam::new(&policy.critic, config.adam()),
        }
    }
}

/// Losses of one [`ppo_update`] call, averaged over mini-batches, plus
/// diagnostics of the very first mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
    /// Largest `|ratio − 1|` on the first mini-batch.
    pub initial_ratio_deviation: f64,
    pub initial_policy_loss: f64,
    /// Mean normalized advantage of the first mini-batch.
    pub initial_mean_advantage: f64,
}

fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + ADVANTAGE_EPS)).collect()
}

/// `K` epochs of shuffled mini-batch updates on a finalized rollout.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    optimizer: &mut PpoOptimizer,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let (adv, returns) = match (buffer.advantages(), buffer.returns()) {
        (Some(a), Some(r)) => (normalize(a), r),
        _ => return Err(Error::NotFinalized),
    };
    let n = buffer.len();
    let dim = policy.state_dim();
    if let Some(t) = buffer.transitions.iter().find(|t| t.state.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: t.state.len(),
        });
    }
    let states = DMatrix::from_fn(dim, n, |r, c| buffer.transitions[c].state.as_slice()[r]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let (clip_lo, clip_hi) = (1.0 - config.clip_range, 1.0 + config.clip_range);

    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            let m = chunk.len() as f64;
            let x = states.select_columns(chunk.iter());

            let cache = policy.actor.forward_batch(&x)?;
            let logits = cache.output();
            let mut grad = DMatrix::zeros(2, chunk.len());
            let (mut clipped_sum, mut unclipped_sum) = (0.0, 0.0);
            let (mut entropy, mut kl, mut clipped, mut max_dev, mut adv_sum) = (0.0, 0.0, 0.0, 0.0f64, 0.0);
            for (j, &i) in chunk.iter().enumerate() {
                let dist = ActionDistribution::from_logits(&[logits[(0, j)], logits[(1, j)]]);
                let tr = &buffer.transitions[i];
                let a = tr.action.index();
                let log_ratio = dist.log_probs[a] - tr.log_prob;
                let ratio = log_ratio.exp();
                let surr = ratio * adv[i];
                let surr_clipped = ratio.clamp(clip_lo, clip_hi) * adv[i];
                clipped_sum += surr.min(surr_clipped);
                unclipped_sum += surr;
                // d(−min)/d log π; zero where the clipped branch is active.
                let dlp = if surr <= surr_clipped { -surr } else { 0.0 };
                let lg = dist.log_prob_grad(a);
                let eg = dist.entropy_grad();
                for k in 0..2 {
                    grad[(k, j)] = (dlp * lg[k] - config.entropy_coef * eg[k]) / m;
                }
                entropy += dist.entropy;
                kl += (ratio - 1.0) - log_ratio;
                clipped += f64::from(u8::from((ratio - 1.0).abs() > config.clip_range));
                max_dev = max_dev.max((ratio - 1.0).abs());
                adv_sum += adv[i];
            }
            assert!(
                clipped_sum <= unclipped_sum + 1e-12 * unclipped_sum.abs().max(1.0),
                "clipped surrogate exceeds the unclipped one"
            );
            let policy_loss = -clipped_sum / m - config.entropy_coef * entropy / m;
            let g = policy.actor.backward(&cache, &grad)?;
            optimizer.actor.step(&mut policy.actor, &g)?;

            let cache = policy.critic.forward_batch(&x)?;
            let values = cache.output();
            let mut vgrad = DMatrix::zeros(1, chunk.len());
            let mut value_loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let err = values[(0, j)] - returns[i];
                value_loss += err * err / m;
                vgrad[(0, j)] = config.value_coef * 2.0 * err / m;
            }
            let g = policy.critic.backward(&cache, &vgrad)?;
            optimizer.critic.step(&mut policy.critic, &g)?;

            if stats.minibatches == 0 {
                stats.initial_ratio_deviation = max_dev;
                stats.initial_policy_loss = policy_loss;
                stats.initial_mean_advantage = adv_sum / m;
            }
            stats.minibatches += 1;
            stats.policy_loss += policy_loss;
            stats.value_loss += config.value_coef * value_loss;
            stats.entropy += entropy / m;
            stats.approx_kl += kl / m;
            stats.clip_fraction += clipped / m;
        }
    }
    let k = stats.minibatches as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    Ok(stats)
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub curve: Vec<CurvePoint>,
    pub updates: Vec<UpdateStats>,
    pub steps: usize,
}

/// Train `policy` in `env` for `ceil(total_steps / B)` rollouts.
/// A budget smaller than one rollout is rejected.
pub fn train_static<E, R>(
    env: &mut E,
    policy: &mut Policy,
    config: &PpoConfig,
    total_steps: usize,
    rng: &mut R,
) -> Result<TrainingReport>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    if total_steps < config.rollout_len {
        return Err(Error::Config(format!(
            "training budget {total_steps} is smaller than one rollout ({})",
            config.rollout_len
        )));
    }
    if env.state_dim() != policy.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: policy.state_dim(),
            got: env.state_dim(),
        });
    }
    let iterations = total_steps.div_ceil(config.rollout_len);
    let mut optimizer = PpoOptimizer::new(policy, config);
    let mut collector = RolloutCollector::new();
    let mut report = TrainingReport::default();
    for iteration in 1..=iterations {
        let mut buffer = collector.collect(env, policy, config.rollout_len, rng)?;
        buffer.finalize(config.gamma, config.gae_lambda)?;
        let stats = ppo_update(policy, &mut optimizer, &buffer, config, rng)?;
        let (reward, len) = collector.episode_summary();
        log::debug!(
            "iteration {iteration}/{iterations}: mean episode reward {reward:.4}, policy loss {:.4}, value loss {:.4}",
            stats.policy_loss,
            stats.value_loss
        );
        report.curve.push(CurvePoint {
            iteration,
            mean_episode_reward: reward,
            mean_episode_length: len,
        });
        report.updates.push(stats);
        report.steps += buffer.len();
    }
    Ok(report)
}

/// A frozen policy used as an [`UpdateStrategy`].
#[derive(Debug, Clone)]
pub struct PolicyStrategy {
    name: String,
    policy: Policy,
    mode: ActMode,
    rng: SimRng,
}

impl PolicyStrategy {
    pub fn new(name: impl Into<String>, policy: Policy, mode: ActMode, rng: SimRng) -> Self {
        PolicyStrategy {
            name: name.into(),
            policy,
            mode,
            rng,
        }
    }
}

impl UpdateStrategy for PolicyStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action> {
        self.policy.act(ctx.state, self.mode, &mut self.rng)
    }
}

/// A policy that keeps training on the transitions it experiences: every
/// `B` decisions it runs a PPO update on those `B` transitions.
#[derive(Debug, Clone)]
pub struct DynamicPpo {
    name: String,
    policy: Policy,
    optimizer: PpoOptimizer,
    config: PpoConfig,
    mode: ActMode,
    rng: SimRng,
    pending: Option<(MdpState, Action, f64, f64)>,
    transitions: Vec<Transition>,
    policy_updates: usize,
}

impl DynamicPpo {
    pub fn new(name: impl Into<String>, policy: Policy, config: PpoConfig, mode: ActMode, rng: SimRng) -> Result<Self> {
        config.validate()?;
        Ok(DynamicPpo {
            name: name.into(),
            optimizer: PpoOptimizer::new(&policy, &config),
            policy,
            config,
            mode,
            rng,
            pending: None,
            transitions: Vec::new(),
            policy_updates: 0,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn policy_updates(&self) -> usize {
        self.policy_updates
    }
}

impl UpdateStrategy for DynamicPpo {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action> {
        let dist = self.policy.distribution(ctx.state)?;
        let value = self.policy.value(ctx.state)?;
        let action = choose(&dist, self.mode, &mut self.rng);
        self.pending = Some((ctx.state.clone(), action, dist.log_probs[action.index()], value));
        Ok(action)
    }

    fn feedback(&mut self, reward: f64, next: Option<&MdpState>) -> Result<()> {
        let (state, action, log_prob, value) = self.pending.take().ok_or(Error::NotReset)?;
        self.transitions.push(Transition {
            state,
            action,
            log_prob,
            reward,
            value,
            done: next.is_none(),
        });
        if self.transitions.len() == self.config.rollout_len {
            let bootstrap = match next {
                Some(s) => self.policy.value(s)?,
                None => 0.0,
            };
            let mut buffer = RolloutBuffer::new(std::mem::take(&mut self.transitions), bootstrap);
            buffer.finalize(self.config.gamma, self.config.gae_lambda)?;
            ppo_update(&mut self.policy, &mut self.optimizer, &buffer, &self.config, &mut self.rng)?;
            self.policy_updates += 1;
        }
        Ok(())
    }
}

/// Deploy `policy` over `batches` while updating it every `config.rollout_len`
/// steps. Returns the trace and the final policy.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_update_loop(
    batches: &[Arc<Batch>],
    initial: LogisticModel,
    fitter: &mut dyn Fitter,
    policy: Policy,
    config: PpoConfig,
    episode: EpisodeConfig,
    mode: ActMode,
    rng: SimRng,
) -> Result<(EpisodeTrace, Policy)> {
    let mut strategy = DynamicPpo::new("ppo_dynamic", policy, config, mode, rng)?;
    let trace = mdp::run_episode(batches, initial, fitter, &mut strategy, episode)?;
    Ok((trace, strategy.into_policy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{self, FitConfig};
    use crate::drift::{self, CovariateMode, DgpParams, DriftConfig};
    use crate::mdp::{IrlsFitter, Step};
    use crate::neural::Dense;
    use crate::rng::{stream_rng, Stream};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Two alternating states; updating pays 1, keeping pays 0.
    struct Bandit {
        t: usize,
        len: usize,
    }

    impl Bandit {
        fn state(&self) -> MdpState {
            if self.t.is_multiple_of(2) {
                MdpState::from_vec(vec![1.0, 0.0, 0.5])
            } else {
                MdpState::from_vec(vec![0.0, 1.0, -0.5])
            }
        }
    }

    impl Environment for Bandit {
        fn state_dim(&self) -> usize {
            3
        }

        fn reset(&mut self) -> Result<MdpState> {
            self.t = 0;
            Ok(self.state())
        }

        fn step(&mut self, action: Action) -> Result<Step> {
            self.t += 1;
            let done = self.t >= self.len;
            Ok(Step {
                next_state: (!done).then(|| self.state()),
                reward: if action.is_update() { 1.0 } else { 0.0 },
                done,
            })
        }
    }

    fn policy(dim: usize, seed: u64) -> Policy {
        Policy::new(dim, &[64, 64], &mut stream_rng(seed, Stream::NetworkInit, 0)).unwrap()
    }

    fn fixed_policy(p_update: f64) -> Policy {
        let logit = (p_update / (1.0 - p_update)).ln();
        let actor = Mlp::from_layers(vec![Dense {
            weights: DMatrix::zeros(2, 3),
            bias: DVector::from_vec(vec![0.0, logit]),
        }])
        .unwrap();
        Policy::from_parts(actor, Mlp::zeros(&[3, 1]).unwrap()).unwrap()
    }

    fn forced_policy() -> Policy {
        let actor = Mlp::from_layers(vec![Dense {
            weights: DMatrix::zeros(2, 3),
            bias: DVector::from_vec(vec![-800.0, 800.0]),
        }])
        .unwrap();
        Policy::from_parts(actor, Mlp::zeros(&[3, 1]).unwrap()).unwrap()
    }

    fn any_state() -> MdpState {
        MdpState::from_vec(vec![0.1, 0.2, 0.3])
    }

    #[test]
    fn forced_update_under_both_modes() {
        let p = forced_policy();
        let mut rng = SimRng::seed_from_u64(1);
        for mode in [ActMode::Probabilistic, ActMode::Deterministic { threshold: 0.5 }] {
            for _ in 0..100 {
                assert_eq!(p.act(&any_state(), mode, &mut rng).unwrap(), Action::Update);
            }
        }
    }

    #[test]
    fn deterministic_below_threshold_keeps() {
        let p = fixed_policy(0.49);
        let a = p
            .act(&any_state(), ActMode::Deterministic { threshold: 0.5 }, &mut SimRng::seed_from_u64(0))
            .unwrap();
        assert_eq!(a, Action::Keep);
    }

    #[test]
    fn probabilistic_frequency_matches() {
        let p = fixed_policy(0.3);
        let mut rng = SimRng::seed_from_u64(2);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| p.act(&any_state(), ActMode::Probabilistic, &mut rng).unwrap().is_update())
            .count();
        assert!((hits as f64 / n as f64 - 0.3).abs() < 0.02);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [0.5, -0.2, 1.0, 0.3];
        let v = [0.1, 0.4, -0.3, 0.2];
        let (adv, ret) = compute_gae(&r, &v, &[false; 4], 0.8, 0.0, 0.7);
        let next = [0.4, -0.3, 0.2, 0.7];
        for t in 0..4 {
            assert_eq!(adv[t], r[t] + 0.8 * next[t] - v[t]);
            assert_eq!(ret[t], adv[t] + v[t]);
        }
    }

    #[test]
    fn gae_all_zero() {
        let (adv, ret) = compute_gae(&[0.0; 6], &[0.0; 6], &[false, false, true, false, false, false], 0.8, 0.95, 0.0);
        assert!(adv.iter().chain(&ret).all(|x| *x == 0.0));
    }

    /// Brute-force `Σ_k γ^k r_{t+k} − V(s_t)` to the end of each episode.
    fn discounted_minus_value(r: &[f64], v: &[f64], dones: &[bool], gamma: f64) -> Vec<f64> {
        (0..r.len())
            .map(|t| {
                let mut g = 0.0;
                let mut disc = 1.0;
                for k in t..r.len() {
                    g += disc * r[k];
                    disc *= gamma;
                    if dones[k] {
                        break;
                    }
                }
                g - v[t]
            })
            .collect()
    }

    fn random_episodic(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut rng = SimRng::seed_from_u64(seed);
        let n = rng.random_range(1..60);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        d[n - 1] = true;
        (r, v, d)
    }

    #[test]
    fn gae_lambda_one_matches_brute_force() {
        for seed in 0..100 {
            let (r, v, d) = random_episodic(seed);
            let (adv, _) = compute_gae(&r, &v, &d, 0.8, 1.0, 123.0);
            for (a, e) in adv.iter().zip(discounted_minus_value(&r, &v, &d, 0.8)) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn collect_is_deterministic() {
        let p = policy(3, 1);
        let run = || {
            let mut env = Bandit { t: 0, len: 7 };
            let b = collect_rollout(&mut env, &p, 50, &mut SimRng::seed_from_u64(9)).unwrap();
            b.transitions().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_step_rollout() {
        let p = policy(3, 1);
        let mut env = Bandit { t: 0, len: 1 };
        let b = collect_rollout(&mut env, &p, 1, &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.transitions()[0].done);
        assert_eq!(b.bootstrap_value(), 0.0);
        let mut env = Bandit { t: 0, len: 5 };
        let b = collect_rollout(&mut env, &p, 1, &mut SimRng::seed_from_u64(1)).unwrap();
        assert!(!b.transitions()[0].done);
        assert_ne!(b.bootstrap_value(), 0.0);
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let p = policy(3, 4);
        let mut env = Bandit { t: 0, len: 200 };
        let b = collect_rollout(&mut env, &p, 2048, &mut SimRng::seed_from_u64(4)).unwrap();
        let freq = b.transitions().iter().filter(|t| t.action.is_update()).count() as f64 / 2048.0;
        assert!((freq - 0.5).abs() < 0.05, "{freq}");
        assert!(b.transitions().iter().all(|t| t.log_prob <= 0.0 && t.value.is_finite()));
    }

    #[test]
    fn finalize_once_and_update_requires_it() {
        let mut p = policy(3, 1);
        let mut env = Bandit { t: 0, len: 5 };
        let cfg = PpoConfig { rollout_len: 8, minibatch_size: 4, ..PpoConfig::default() };
        let mut rng = SimRng::seed_from_u64(1);
        let mut b = collect_rollout(&mut env, &p, 8, &mut rng).unwrap();
        let mut opt = PpoOptimizer::new(&p, &cfg);
        assert!(matches!(ppo_update(&mut p, &mut opt, &b, &cfg, &mut rng), Err(Error::NotFinalized)));
        b.finalize(0.8, 0.95).unwrap();
        assert!(matches!(b.finalize(0.8, 0.95), Err(Error::AlreadyFinalized)));
    }

    #[test]
    fn zero_advantages_leave_actor_unchanged() {
        let mut p = policy(3, 2);
        let transitions: Vec<Transition> = (0..16)
            .map(|i| {
                let s = MdpState::from_vec(vec![i as f64 * 0.1, 1.0, -0.5]);
                let d = p.distribution(&s).unwrap();
                let a = Action::from_index(i % 2);
                Transition { state: s, action: a, log_prob: d.log_probs[a.index()], reward: 0.0, value: 0.0, done: i == 15 }
            })
            .collect();
        let mut b = RolloutBuffer::new(transitions, 0.0);
        b.finalize(0.8, 0.95).unwrap();
        assert!(b.advantages().unwrap().iter().all(|a| *a == 0.0));
        let cfg = PpoConfig { rollout_len: 16, minibatch_size: 4, ..PpoConfig::default() };
        let before = p.actor.parameters();
        let mut opt = PpoOptimizer::new(&p, &cfg);
        ppo_update(&mut p, &mut opt, &b, &cfg, &mut SimRng::seed_from_u64(0)).unwrap();
        assert_eq!(p.actor.parameters(), before);
    }

    #[test]
    fn first_minibatch_ratio_identity() {
        let mut p = policy(3, 3);
        let mut env = Bandit { t: 0, len: 9 };
        let mut rng = SimRng::seed_from_u64(3);
        let cfg = PpoConfig { rollout_len: 64, minibatch_size: 16, ..PpoConfig::default() };
        let mut b = collect_rollout(&mut env, &p, 64, &mut rng).unwrap();
        b.finalize(cfg.gamma, cfg.gae_lambda).unwrap();
        let mut opt = PpoOptimizer::new(&p, &cfg);
        let stats = ppo_update(&mut p, &mut opt, &b, &cfg, &mut rng).unwrap();
        assert!(stats.initial_ratio_deviation < 1e-10);
        assert!((stats.initial_policy_loss + stats.initial_mean_advantage).abs() < 1e-10);
        assert_eq!(stats.minibatches, 40);
    }

    #[test]
    fn learns_the_rewarded_action() {
        let mut p = policy(3, 5);
        let mut env = Bandit { t: 0, len: 10 };
        let cfg = PpoConfig { rollout_len: 64, minibatch_size: 16, ..PpoConfig::default() };
        let mut rng = SimRng::seed_from_u64(5);
        let report = train_static(&mut env, &mut p, &cfg, 64 * 100, &mut rng).unwrap();
        assert_eq!(report.updates.len(), 100);
        for s in [env.reset().unwrap(), { env.t = 1; env.state() }] {
            assert!(p.update_probability(&s).unwrap() > 0.95);
        }
        let first = report.curve.first().unwrap().mean_episode_reward;
        let last = report.curve.last().unwrap().mean_episode_reward;
        assert!(last > first);
    }

    #[test]
    fn budget_below_one_rollout_is_rejected() {
        let mut p = policy(3, 1);
        let cfg = PpoConfig { rollout_len: 64, minibatch_size: 16, ..PpoConfig::default() };
        let r = train_static(&mut Bandit { t: 0, len: 10 }, &mut p, &cfg, 63, &mut SimRng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig::dynamic_default().validate().is_ok());
        assert!(PpoConfig { minibatch_size: 4096, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { gamma: 1.5, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { clip_range: 0.0, ..PpoConfig::default() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = policy(14, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(p.actor.parameters(), q.actor.parameters());
        assert_eq!(p.critic.parameters(), q.critic.parameters());
        assert!(matches!(Policy::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    fn deployment_batches(horizon: usize, seed: u64) -> (Vec<Arc<Batch>>, LogisticModel) {
        let theta = DgpParams::linear(0.0, vec![1.0, -0.5, 0.8, 0.3, -1.2]);
        let drift_cfg = DriftConfig { step_std: 0.05, jump_prob: 0.05, jump_std: 1.0 };
        let path = drift::generate_drift_path(&theta, &drift_cfg, horizon, &mut stream_rng(seed, Stream::Drift, 0)).unwrap();
        let mut rng = stream_rng(seed, Stream::Labels, 0);
        let batches: Vec<Arc<Batch>> = (1..=horizon)
            .map(|t| Arc::new(drift::generate_batch(path.at(t), 300, t, CovariateMode::Resample, &mut rng).unwrap()))
            .collect();
        let initial = classifier::fit(&batches[0], &FitConfig::default()).unwrap();
        (batches, initial)
    }

    fn episode_cfg(horizon: usize) -> EpisodeConfig {
        EpisodeConfig { horizon, rho: 0.02, time_scale: 50, threshold: 0.5 }
    }

    #[test]
    fn dynamic_with_long_counter_matches_static() {
        let (batches, initial) = deployment_batches(20, 1);
        let p = policy(14, 1);
        let cfg = PpoConfig { rollout_len: 64, minibatch_size: 16, ..PpoConfig::dynamic_default() };
        let (dyn_trace, after) = dynamic_update_loop(
            &batches,
            initial.clone(),
            &mut IrlsFitter(FitConfig::default()),
            p.clone(),
            cfg,
            episode_cfg(20),
            ActMode::Probabilistic,
            stream_rng(1, Stream::Policy, 0),
        )
        .unwrap();
        let mut frozen = PolicyStrategy::new("ppo_static", p.clone(), ActMode::Probabilistic, stream_rng(1, Stream::Policy, 0));
        let static_trace =
            mdp::run_episode(&batches, initial, &mut IrlsFitter(FitConfig::default()), &mut frozen, episode_cfg(20)).unwrap();
        assert_eq!(dyn_trace, static_trace);
        assert_eq!(after, p);
    }

    #[test]
    fn dynamic_counter_arithmetic() {
        let (batches, initial) = deployment_batches(13, 2);
        let cfg = PpoConfig { rollout_len: 4, minibatch_size: 2, ..PpoConfig::dynamic_default() };
        let mut s = DynamicPpo::new("ppo_dynamic", policy(14, 2), cfg, ActMode::Probabilistic, stream_rng(2, Stream::Policy, 0)).unwrap();
        let trace = mdp::run_episode(&batches, initial, &mut IrlsFitter(FitConfig::default()), &mut s, episode_cfg(13)).unwrap();
        assert_eq!(trace.actions.len(), 13);
        assert_eq!(s.policy_updates(), 3);
    }

    proptest! {
        #[test]
        fn gae_lambda_one_oracle(seed in 0u64..10_000, gamma in 0.0f64..1.0) {
            let (r, v, d) = random_episodic(seed);
            let (adv, ret) = compute_gae(&r, &v, &d, gamma, 1.0, -7.0);
            let oracle = discounted_minus_value(&r, &v, &d, gamma);
            for t in 0..r.len() {
                prop_assert!((adv[t] - oracle[t]).abs() < 1e-10);
                prop_assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_advantages_are_standardized(values in proptest::collection::vec(-10f64..10.0, 2..50)) {
            let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let z = normalize(&values);
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
