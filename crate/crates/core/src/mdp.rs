//! The update decision as a Markov decision process.
//!
//! An [`Episode`] is the bookkeeping shared by training and deployment: it
//! receives one batch per step, exposes the state the decision is taken on,
//! charges the reward for the chosen action and keeps the update history and
//! utility ledger. [`SimulatedEnv`] drives episodes from sampled drift paths
//! behind the step/reset [`Environment`] interface used by PPO; the
//! [`run_episode`] loop drives them from a fixed batch sequence for any
//! [`UpdateStrategy`].

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, FitConfig, LogisticModel, MetricSet};
use crate::drift::{self, Batch, CovariateMode, DgpParams, DriftConfig, DriftPath};
use crate::rng::SimRng;
use crate::{Error, Result};

/// Number of recent batches whose accuracies enter the state.
pub const ACCURACY_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Keep,
    Update,
}

impl Action {
    pub fn is_update(self) -> bool {
        self == Action::Update
    }

    /// 0 for keep, 1 for update; also the index into the policy's logits.
    pub fn index(self) -> usize {
        match self {
            Action::Keep => 0,
            Action::Update => 1,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == 0 {
            Action::Keep
        } else {
            Action::Update
        }
    }
}

/// Policy input. Layout for a classifier of dimension `d`:
///
/// | slot | content |
/// |------|---------|
/// | 0..3 | accuracy of the deployed model on `Δ_t, Δ_{t−1}, Δ_{t−2}` |
/// | 3 | accuracy at the last update, `η(Δ_{u(t−1)}, C_{u(t−1)})` |
/// | 4, 5, 6 | precision, recall, cross-entropy on `Δ_t` |
/// | 7..8+d | intercept and weights of the deployed model |
/// | 8+d | `(t − u(t−1)) / J` |
#[derive(Debug, Clone, PartialEq)]
pub struct MdpState(Vec<f64>);

impl MdpState {
    pub fn len_for(dim: usize) -> usize {
        ACCURACY_WINDOW + 1 + 3 + (dim + 1) + 1
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        MdpState(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn accuracies(&self) -> &[f64] {
        &self.0[..ACCURACY_WINDOW]
    }

    pub fn acc_at_last_update(&self) -> f64 {
        self.0[ACCURACY_WINDOW]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.0[ACCURACY_WINDOW + 4..self.0.len() - 1]
    }

    pub fn steps_since_update(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// Assemble the state from the metrics of the deployed model on the most
/// recent batches (`recent`, oldest first, current batch last).
pub fn build_state(
    recent: &[MetricSet],
    acc_at_last_update: f64,
    model: &LogisticModel,
    t: usize,
    tracker: &UpdateTracker,
    time_scale: usize,
) -> Result<MdpState> {
    let current = recent
        .last()
        .ok_or_else(|| Error::Config("state needs at least one recent batch".into()))?;
    if t == 0 || time_scale == 0 {
        return Err(Error::Config("t and time scale must be at least 1".into()));
    }
    let mut v = Vec::with_capacity(MdpState::len_for(model.dim()));
    let earliest = recent[0].accuracy;
    for k in 0..ACCURACY_WINDOW {
        v.push(
            recent
                .len()
                .checked_sub(k + 1)
                .map_or(earliest, |i| recent[i].accuracy),
        );
    }
    v.push(acc_at_last_update);
    v.extend([current.precision, current.recall, current.cross_entropy]);
    v.push(model.intercept);
    v.extend_from_slice(&model.weights);
    let since = t - tracker.last_update().unwrap_or(t).min(t);
    v.push(since as f64 / time_scale as f64);
    debug_assert!(v.iter().all(|x| x.is_finite()));
    Ok(MdpState(v))
}

/// `u(t)`, the most recent update time, maintained through
/// `u(t) = t` if `a_t = 1` else `u(t−1)`, with `a_1 = 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateTracker {
    last_update: Option<usize>,
    history: Vec<Action>,
}

impl UpdateTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time of the last recorded action (0 before the first).
    pub fn t(&self) -> usize {
        self.history.len()
    }

    pub fn last_update(&self) -> Option<usize> {
        self.last_update
    }

    pub fn history(&self) -> &[Action] {
        &self.history
    }

    /// Record `a_t` and return `u(t)`.
    pub fn apply_action(&mut self, t: usize, action: Action) -> Result<usize> {
        let expected = self.history.len() + 1;
        if t != expected {
            return Err(Error::NonSequentialStep { expected, got: t });
        }
        if t == 1 && !action.is_update() {
            return Err(Error::InitialActionNotUpdate);
        }
        self.history.push(action);
        if action.is_update() {
            self.last_update = Some(t);
        }
        let u = self.last_update.expect("a_1 = 1 guarantees an update");
        assert!(
            self.history[u - 1].is_update() && self.history[u..].iter().all(|a| !a.is_update()),
            "update-time recursion violated at t = {t}"
        );
        Ok(u)
    }

    /// `u(1), …, u(t)` recomputed from the action history.
    pub fn u_sequence(&self) -> Vec<usize> {
        let mut u = 0;
        self.history
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if a.is_update() {
                    u = i + 1;
                }
                u
            })
            .collect()
    }
}

/// Realized utilities and actions with a running cumulative utility at a
/// fixed update cost.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityLedger {
    update_cost: f64,
    utilities: Vec<f64>,
    actions: Vec<Action>,
    total: f64,
}

impl UtilityLedger {
    pub fn new(update_cost: f64) -> Self {
        UtilityLedger {
            update_cost,
            utilities: Vec::new(),
            actions: Vec::new(),
            total: 0.0,
        }
    }

    pub fn record(&mut self, utility: f64, action: Action) {
        let charged = !self.actions.is_empty() && action.is_update();
        self.total += utility - if charged { self.update_cost } else { 0.0 };
        self.utilities.push(utility);
        self.actions.push(action);
    }

    pub fn len(&self) -> usize {
        self.utilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utilities.is_empty()
    }

    pub fn utilities(&self) -> &[f64] {
        &self.utilities
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Incrementally maintained total at this ledger's cost.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Updates chargeable at cost, i.e. excluding the initial fit.
    pub fn update_count(&self) -> usize {
        count_charged_updates(&self.actions)
    }

    pub fn cumulative_utility_at(&self, update_cost: f64) -> f64 {
        cumulative_utility(&self.utilities, &self.actions, update_cost)
    }
}

fn count_charged_updates(actions: &[Action]) -> usize {
    actions.iter().skip(1).filter(|a| a.is_update()).count()
}

/// `Σ_t η_t − μ·Σ_{t≥2} a_t`. The mandatory fit at `t = 1` is not charged.
pub fn cumulative_utility(utilities: &[f64], actions: &[Action], update_cost: f64) -> f64 {
    debug_assert_eq!(utilities.len(), actions.len());
    utilities.iter().sum::<f64>() - update_cost * count_charged_updates(actions) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub rho: f64,
}

/// Reward from the two accuracies on the current batch: zero when keeping,
/// otherwise the accuracy gained by refitting minus the penalty `rho`.
pub fn reward_from_utilities(refit: f64, incumbent: f64, rho: f64, action: Action) -> f64 {
    match action {
        Action::Keep => 0.0,
        Action::Update => refit - incumbent - rho,
    }
}

/// Reward of taking `action` on `batch`. `candidate` (the model fitted on
/// `batch`) is only consulted for an update.
pub fn compute_reward(
    batch: &Batch,
    candidate: Option<&LogisticModel>,
    incumbent: &LogisticModel,
    rho: f64,
    action: Action,
    threshold: f64,
) -> Result<f64> {
    match action {
        Action::Keep => Ok(0.0),
        Action::Update => {
            let candidate = candidate
                .ok_or_else(|| Error::Config("an update needs a candidate model".into()))?;
            let refit = classifier::utility(candidate, batch, threshold)?;
            let old = classifier::utility(incumbent, batch, threshold)?;
            Ok(reward_from_utilities(refit, old, rho, action))
        }
    }
}

/// Produces the candidate model for an update.
pub trait Fitter {
    fn fit(&mut self, batch: &Batch) -> Result<LogisticModel>;
}

impl<F: FnMut(&Batch) -> Result<LogisticModel>> Fitter for F {
    fn fit(&mut self, batch: &Batch) -> Result<LogisticModel> {
        self(batch)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IrlsFitter(pub FitConfig);

impl Fitter for IrlsFitter {
    fn fit(&mut self, batch: &Batch) -> Result<LogisticModel> {
        classifier::fit(batch, &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Episode length (`J` in training, `T` in deployment).
    pub horizon: usize,
    pub rho: f64,
    /// Divisor of the steps-since-update feature.
    pub time_scale: usize,
    pub threshold: f64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config("episode horizon must be at least 2".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config("rho must be non-negative".into()));
        }
        if self.time_scale == 0 {
            return Err(Error::Config("time scale must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-step record of one episode, indexed by `t − 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub utilities: Vec<f64>,
    pub last_update: Vec<usize>,
}

impl EpisodeTrace {
    pub fn update_count(&self) -> usize {
        count_charged_updates(&self.actions)
    }

    pub fn cumulative_utility(&self, update_cost: f64) -> f64 {
        cumulative_utility(&self.utilities, &self.actions, update_cost)
    }
}

#[derive(Debug, Clone)]
struct WindowEntry {
    batch: Arc<Batch>,
    /// Metrics of the current incumbent on this batch, if computed.
    metrics: Option<MetricSet>,
}

/// Step-by-step state of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    config: EpisodeConfig,
    t: usize,
    incumbent: LogisticModel,
    acc_at_last_update: f64,
    window: VecDeque<WindowEntry>,
    tracker: UpdateTracker,
    ledger: UtilityLedger,
    trace: EpisodeTrace,
    awaiting_action: bool,
}

impl Episode {
    /// Start at `t = 1` with the mandatory initial fit (`a_1 = 1, r_1 = 0`).
    pub fn begin(first: Arc<Batch>, initial: LogisticModel, config: EpisodeConfig) -> Result<Self> {
        config.validate()?;
        let metrics = classifier::evaluate(&initial, &first, config.threshold)?;
        let mut tracker = UpdateTracker::new();
        let u = tracker.apply_action(1, Action::Update)?;
        let mut ledger = UtilityLedger::new(0.0);
        ledger.record(metrics.accuracy, Action::Update);
        let mut window = VecDeque::with_capacity(ACCURACY_WINDOW);
        window.push_back(WindowEntry {
            batch: first,
            metrics: Some(metrics),
        });
        Ok(Episode {
            config,
            t: 1,
            incumbent: initial,
            acc_at_last_update: metrics.accuracy,
            window,
            tracker,
            ledger,
            trace: EpisodeTrace {
                actions: vec![Action::Update],
                rewards: vec![0.0],
                utilities: vec![metrics.accuracy],
                last_update: vec![u],
            },
            awaiting_action: false,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    /// Time of the most recently observed batch.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn incumbent(&self) -> &LogisticModel {
        &self.incumbent
    }

    pub fn tracker(&self) -> &UpdateTracker {
        &self.tracker
    }

    pub fn ledger(&self) -> &UtilityLedger {
        &self.ledger
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EpisodeTrace {
        self.trace
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.horizon && !self.awaiting_action
    }

    /// The batch the next action applies to, if one is pending.
    pub fn current_batch(&self) -> Option<&Batch> {
        if self.awaiting_action {
            self.window.back().map(|e| e.batch.as_ref())
        } else {
            None
        }
    }

    /// State from the current window, without advancing time.
    pub fn state(&mut self) -> Result<MdpState> {
        let threshold = self.config.threshold;
        for entry in self.window.iter_mut() {
            if entry.metrics.is_none() {
                entry.metrics = Some(classifier::evaluate(&self.incumbent, &entry.batch, threshold)?);
            }
        }
        let recent: Vec<MetricSet> = self.window.iter().filter_map(|e| e.metrics).collect();
        build_state(
            &recent,
            self.acc_at_last_update,
            &self.incumbent,
            self.t,
            &self.tracker,
            self.config.time_scale,
        )
    }

    /// Receive `Δ_{t+1}` and return the state the action at `t + 1` is
    /// taken on.
    pub fn observe(&mut self, batch: Arc<Batch>) -> Result<MdpState> {
        if self.awaiting_action {
            return Err(Error::Config("observe called before acting on the previous batch".into()));
        }
        if self.t >= self.config.horizon {
            return Err(Error::EpisodeFinished);
        }
        if batch.time_index() != self.t + 1 {
            return Err(Error::NonSequentialStep {
                expected: self.t + 1,
                got: batch.time_index(),
            });
        }
        if self.window.len() == ACCURACY_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(WindowEntry {
            batch,
            metrics: None,
        });
        self.t += 1;
        self.awaiting_action = true;
        self.state()
    }

    /// Metrics of the incumbent on the pending batch.
    fn current_metrics(&mut self) -> Result<MetricSet> {
        let threshold = self.config.threshold;
        let entry = self.window.back_mut().ok_or(Error::NotReset)?;
        if entry.metrics.is_none() {
            entry.metrics = Some(classifier::evaluate(&self.incumbent, &entry.batch, threshold)?);
        }
        Ok(entry.metrics.expect("just filled"))
    }

    /// Apply `a_t` to the pending batch and return `r_t`. The fitter is
    /// called only for an update.
    pub fn act(&mut self, action: Action, fitter: &mut dyn Fitter) -> Result<f64> {
        if !self.awaiting_action {
            return Err(if self.is_done() {
                Error::EpisodeFinished
            } else {
                Error::NotReset
            });
        }
        let incumbent_acc = self.current_metrics()?.accuracy;
        let u = self.tracker.apply_action(self.t, action)?;
        let (reward, utility) = match action {
            Action::Keep => (0.0, incumbent_acc),
            Action::Update => {
                let batch = Arc::clone(&self.window.back().expect("pending batch").batch);
                let candidate = fitter.fit(&batch)?;
                let refit = classifier::evaluate(&candidate, &batch, self.config.threshold)?;
                self.incumbent = candidate;
                self.acc_at_last_update = refit.accuracy;
                for entry in self.window.iter_mut() {
                    entry.metrics = None;
                }
                self.window.back_mut().expect("pending batch").metrics = Some(refit);
                (
                    reward_from_utilities(refit.accuracy, incumbent_acc, self.config.rho, action),
                    refit.accuracy,
                )
            }
        };
        self.ledger.record(utility, action);
        self.trace.actions.push(action);
        self.trace.rewards.push(reward);
        self.trace.utilities.push(utility);
        self.trace.last_update.push(u);
        self.awaiting_action = false;
        Ok(reward)
    }
}

/// What a strategy sees when deciding `a_t`.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub t: usize,
    pub horizon: usize,
    pub state: &'a MdpState,
    pub batch: &'a Batch,
    pub incumbent: &'a LogisticModel,
    pub threshold: f64,
}

/// Common interface of every updating strategy (learned policies, drift
/// detectors, schedules).
pub trait UpdateStrategy {
    fn name(&self) -> &str;

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action>;

    /// Reward for the last decision and the next state (`None` at the end
    /// of the episode).
    fn feedback(&mut self, _reward: f64, _next: Option<&MdpState>) -> Result<()> {
        Ok(())
    }
}

/// Drive `strategy` over `batches` (`Δ_1..Δ_T`, `Δ_1` first) starting from
/// `initial` (fitted on `Δ_1`).
pub fn run_episode(
    batches: &[Arc<Batch>],
    initial: LogisticModel,
    fitter: &mut dyn Fitter,
    strategy: &mut dyn UpdateStrategy,
    config: EpisodeConfig,
) -> Result<EpisodeTrace> {
    let config = EpisodeConfig {
        horizon: batches.len(),
        ..config
    };
    let first = batches.first().ok_or(Error::EmptyBatch)?;
    let mut episode = Episode::begin(Arc::clone(first), initial, config)?;
    let mut state = match batches.get(1) {
        Some(b) => episode.observe(Arc::clone(b))?,
        None => return Ok(episode.into_trace()),
    };
    loop {
        let action = {
            let ctx = DecisionContext {
                t: episode.t(),
                horizon: config.horizon,
                state: &state,
                batch: episode.current_batch().expect("pending batch"),
                incumbent: episode.incumbent(),
                threshold: config.threshold,
            };
            strategy.decide(&ctx)?
        };
        let reward = episode.act(action, fitter)?;
        match batches.get(episode.t()) {
            Some(next) => {
                state = episode.observe(Arc::clone(next))?;
                strategy.feedback(reward, Some(&state))?;
            }
            None => {
                strategy.feedback(reward, None)?;
                break;
            }
        }
    }
    Ok(episode.into_trace())
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// State for the next decision; `None` once the episode is over.
    pub next_state: Option<MdpState>,
    pub reward: f64,
    pub done: bool,
}

/// Step/reset interface consumed by rollout collection.
pub trait Environment {
    fn state_dim(&self) -> usize;

    /// Start a new episode and return the first decision state.
    fn reset(&mut self) -> Result<MdpState>;

    fn step(&mut self, action: Action) -> Result<Step>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEnvConfig {
    /// Assumed starting parameters of the data generating process.
    pub theta1: DgpParams,
    /// Assumed drift process.
    pub drift: DriftConfig,
    pub episode: EpisodeConfig,
    /// Reuse the initial covariates for every simulated batch instead of
    /// resampling them.
    pub fixed_covariates: bool,
    pub fit: FitConfig,
}

/// Simulating environment: each episode samples a fresh drift path from the
/// assumed drift process and generates one batch per step from the assumed
/// data generating process. The initial batch and model are shared by every
/// episode.
pub struct SimulatedEnv<F: Fitter = IrlsFitter> {
    config: SimEnvConfig,
    first: Arc<Batch>,
    initial_model: LogisticModel,
    rng: SimRng,
    fitter: F,
    path: Option<DriftPath>,
    episode: Option<Episode>,
}

impl SimulatedEnv<IrlsFitter> {
    pub fn new(config: SimEnvConfig, first: Batch, initial_model: LogisticModel, rng: SimRng) -> Result<Self> {
        let fitter = IrlsFitter(config.fit);
        SimulatedEnv::with_fitter(config, first, initial_model, rng, fitter)
    }
}

impl<F: Fitter> SimulatedEnv<F> {
    pub fn with_fitter(
        config: SimEnvConfig,
        first: Batch,
        initial_model: LogisticModel,
        rng: SimRng,
        fitter: F,
    ) -> Result<Self> {
        config.episode.validate()?;
        config.drift.validate()?;
        config.theta1.validate()?;
        if first.dim() != config.theta1.covariate_dim() {
            return Err(Error::DimensionMismatch {
                expected: config.theta1.covariate_dim(),
                got: first.dim(),
            });
        }
        if initial_model.dim() != first.dim() {
            return Err(Error::DimensionMismatch {
                expected: first.dim(),
                got: initial_model.dim(),
            });
        }
        Ok(SimulatedEnv {
            config,
            first: Arc::new(first),
            initial_model,
            rng,
            fitter,
            path: None,
            episode: None,
        })
    }

    pub fn config(&self) -> &SimEnvConfig {
        &self.config
    }

    pub fn fitter(&self) -> &F {
        &self.fitter
    }

    pub fn episode(&self) -> Option<&Episode> {
        self.episode.as_ref()
    }

    fn next_batch(&mut self, t: usize) -> Result<Batch> {
        let path = self.path.as_ref().ok_or(Error::NotReset)?;
        let mode = if self.config.fixed_covariates {
            CovariateMode::Fixed(self.first.covariates())
        } else {
            CovariateMode::Resample
        };
        drift::generate_batch(path.at(t), self.first.len(), t, mode, &mut self.rng)
    }
}

impl<F: Fitter> Environment for SimulatedEnv<F> {
    fn state_dim(&self) -> usize {
        MdpState::len_for(self.initial_model.dim())
    }

    fn reset(&mut self) -> Result<MdpState> {
        let horizon = self.config.episode.horizon;
        self.path = Some(drift::generate_drift_path(
            &self.config.theta1,
            &self.config.drift,
            horizon,
            &mut self.rng,
        )?);
        let mut episode = Episode::begin(
            Arc::clone(&self.first),
            self.initial_model.clone(),
            self.config.episode,
        )?;
        let batch = self.next_batch(2)?;
        let state = episode.observe(Arc::new(batch))?;
        self.episode = Some(episode);
        Ok(state)
    }

    fn step(&mut self, action: Action) -> Result<Step> {
        let mut episode = self.episode.take().ok_or(Error::NotReset)?;
        if episode.is_done() {
            self.episode = Some(episode);
            return Err(Error::EpisodeFinished);
        }
        let reward = episode.act(action, &mut self.fitter)?;
        let step = if episode.t() >= self.config.episode.horizon {
            Step {
                next_state: None,
                reward,
                done: true,
            }
        } else {
            let batch = self.next_batch(episode.t() + 1)?;
            Step {
                next_state: Some(episode.observe(Arc::new(batch))?),
                reward,
                done: false,
            }
        };
        self.episode = Some(episode);
        Ok(step)
    }
}
