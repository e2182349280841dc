//! Experiment orchestration: configuration, the two scenarios, multi-run
//! comparison of every strategy on identical batch streams, penalty tuning
//! and the files written for each experiment.
//!
//! Seeding is hierarchical (see [`crate::rng`]): the initial parameters and
//! `Δ_1` come from the master seed alone and are shared by training and all
//! evaluation runs; run `r` draws its drift path and batches from streams
//! indexed by `r`. Runs are evaluated in parallel and collected in run
//! order, so results do not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, Calibration, Ddm, DetectorStrategy, HddmA, Schedule, ScheduleStrategy};
use crate::classifier::{self, FitConfig};
use crate::drift::{self, CovariateMode, ExtendedTerms};
use crate::mdp::{self, EpisodeConfig, EpisodeTrace, Environment, SimEnvConfig, SimulatedEnv};
use crate::neural::{self, GradCheckReport};
use crate::ppo::{self, ActMode, CurvePoint, DynamicPpo, PolicyStrategy, TrainingReport};
use crate::rng::{stream_rng, Stream};
use crate::{Batch, DgpParams, DriftConfig, Error, LogisticModel, Policy, PpoConfig, Result, UpdateStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// The training environment uses the true starting parameters and the
    /// true drift process.
    WellSpecified,
    /// The truth has terms and a covariate the classifier never sees; the
    /// training environment assumes a linear model estimated on `Δ_1` and
    /// a drift process with half the step size and no shocks.
    Misspecified,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "well_specified" => Ok(ScenarioKind::WellSpecified),
            "misspecified" => Ok(ScenarioKind::Misspecified),
            _ => Err(Error::Config(format!(
                "unknown scenario {s:?} (expected well_specified or misspecified)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActModeKind {
    Probabilistic,
    Deterministic,
}

/// Every experiment setting. Serialized as a flat TOML table; missing keys
/// take their defaults, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    /// Model life-span `T`.
    pub horizon: usize,
    /// Samples per batch `n`.
    pub batch_size: usize,
    pub num_runs: usize,
    pub mu_grid: Vec<f64>,
    pub rho: f64,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub threshold: f64,

    /// Covariates the classifier observes.
    pub covariate_dim: usize,
    pub intercept: f64,
    /// Scale of the initial coefficients, drawn `N(0, coefficient_std²)`.
    pub coefficient_std: f64,
    /// Scale of the misspecified truth's extra terms.
    pub extended_std: f64,
    pub step_std: f64,
    pub jump_prob: f64,
    pub jump_std: f64,
    pub fixed_covariates: bool,

    pub fit_ridge: f64,
    pub fit_tolerance: f64,
    pub fit_max_iterations: usize,

    pub training_steps: usize,
    /// Training-episode length `J`; also the divisor of the
    /// steps-since-update feature.
    pub episode_len: usize,
    pub ppo_rollout_len: usize,
    pub ppo_minibatch_size: usize,
    pub ppo_epochs: usize,
    pub ppo_clip_range: f64,
    pub ppo_gamma: f64,
    pub ppo_gae_lambda: f64,
    pub ppo_value_coef: f64,
    pub ppo_entropy_coef: f64,
    pub ppo_learning_rate: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub ppo_max_grad_norm: f64,
    pub ppo_hidden_sizes: Vec<usize>,
    pub dynamic_rollout_len: usize,
    pub dynamic_minibatch_size: usize,
    pub dynamic_epochs: usize,
    pub dynamic_learning_rate: f64,
    pub act_mode: ActModeKind,
    pub act_threshold: f64,

    pub ddm_min_samples: usize,
    pub ddm_warning_level: f64,
    pub ddm_drift_level: f64,
    pub hddm_drift_confidence: f64,
    pub hddm_warning_confidence: f64,

    pub rho_grid: Vec<f64>,
    pub pilot_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ppo = PpoConfig::default();
        let dynamic = PpoConfig::dynamic_default();
        let fit = FitConfig::default();
        ExperimentConfig {
            scenario: ScenarioKind::WellSpecified,
            horizon: 500,
            batch_size: 10_000,
            num_runs: 50,
            mu_grid: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            rho: 0.02,
            master_seed: 42,
            out_dir: PathBuf::from("results"),
            threshold: 0.5,
            covariate_dim: 5,
            intercept: 0.0,
            coefficient_std: 1.0,
            extended_std: 0.5,
            step_std: 0.05,
            jump_prob: 0.05,
            jump_std: 1.5,
            fixed_covariates: false,
            fit_ridge: fit.ridge,
            fit_tolerance: fit.tolerance,
            fit_max_iterations: fit.max_iterations,
            training_steps: 200_000,
            episode_len: 200,
            ppo_rollout_len: ppo.rollout_len,
            ppo_minibatch_size: ppo.minibatch_size,
            ppo_epochs: ppo.epochs,
            ppo_clip_range: ppo.clip_range,
            ppo_gamma: ppo.gamma,
            ppo_gae_lambda: ppo.gae_lambda,
            ppo_value_coef: ppo.value_coef,
            ppo_entropy_coef: ppo.entropy_coef,
            ppo_learning_rate: ppo.learning_rate,
            ppo_max_grad_norm: ppo.max_grad_norm.unwrap_or(0.0),
            ppo_hidden_sizes: ppo.hidden_sizes,
            dynamic_rollout_len: dynamic.rollout_len,
            dynamic_minibatch_size: dynamic.minibatch_size,
            dynamic_epochs: dynamic.epochs,
            dynamic_learning_rate: dynamic.learning_rate,
            act_mode: ActModeKind::Probabilistic,
            act_threshold: 0.5,
            ddm_min_samples: 30,
            ddm_warning_level: 2.0,
            ddm_drift_level: 3.0,
            hddm_drift_confidence: 0.001,
            hddm_warning_confidence: 0.005,
            rho_grid: vec![0.005, 0.01, 0.02, 0.03, 0.04],
            pilot_runs: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.horizon < 2 {
            return fail(format!("horizon T must be at least 2, got {}", self.horizon));
        }
        if self.batch_size < 2 {
            return fail(format!("batch size n must be at least 2, got {}", self.batch_size));
        }
        if self.num_runs == 0 {
            return fail("num_runs must be at least 1".into());
        }
        if self.mu_grid.is_empty() || self.mu_grid.iter().any(|m| !(*m >= 0.0)) {
            return fail("mu_grid must be non-empty with entries >= 0".into());
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(*r >= 0.0)) {
            return fail("rho_grid must be non-empty with entries >= 0".into());
        }
        if self.pilot_runs == 0 {
            return fail("pilot_runs must be at least 1".into());
        }
        if self.covariate_dim < 3 {
            return fail("covariate_dim must be at least 3".into());
        }
        if !(self.coefficient_std >= 0.0 && self.extended_std >= 0.0) {
            return fail("coefficient scales must be non-negative".into());
        }
        if !(self.act_threshold > 0.0 && self.act_threshold < 1.0) {
            return fail("act_threshold must lie in (0, 1)".into());
        }
        if self.training_steps == 0 {
            return fail("training_steps must be at least 1".into());
        }
        self.drift().validate()?;
        self.episode(self.episode_len.max(2)).validate()?;
        if self.episode_len < 2 {
            return fail("episode_len must be at least 2".into());
        }
        self.ppo_config().validate()?;
        self.dynamic_config().validate()?;
        HddmA::new(self.hddm_drift_confidence, self.hddm_warning_confidence)?;
        Ok(())
    }

    pub fn drift(&self) -> DriftConfig {
        DriftConfig {
            step_std: self.step_std,
            jump_prob: self.jump_prob,
            jump_std: self.jump_std,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            ridge: self.fit_ridge,
            tolerance: self.fit_tolerance,
            max_iterations: self.fit_max_iterations,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            rollout_len: self.ppo_rollout_len,
            minibatch_size: self.ppo_minibatch_size,
            epochs: self.ppo_epochs,
            clip_range: self.ppo_clip_range,
            gamma: self.ppo_gamma,
            gae_lambda: self.ppo_gae_lambda,
            value_coef: self.ppo_value_coef,
            entropy_coef: self.ppo_entropy_coef,
            learning_rate: self.ppo_learning_rate,
            max_grad_norm: (self.ppo_max_grad_norm > 0.0).then_some(self.ppo_max_grad_norm),
            hidden_sizes: self.ppo_hidden_sizes.clone(),
        }
    }

    pub fn dynamic_config(&self) -> PpoConfig {
        PpoConfig {
            rollout_len: self.dynamic_rollout_len,
            minibatch_size: self.dynamic_minibatch_size,
            epochs: self.dynamic_epochs,
            learning_rate: self.dynamic_learning_rate,
            ..self.ppo_config()
        }
    }

    pub fn act_mode(&self) -> ActMode {
        match self.act_mode {
            ActModeKind::Probabilistic => ActMode::Probabilistic,
            ActModeKind::Deterministic => ActMode::Deterministic {
                threshold: self.act_threshold,
            },
        }
    }

    /// Episode settings for an episode of length `horizon` at the
    /// configured penalty.
    pub fn episode(&self, horizon: usize) -> EpisodeConfig {
        EpisodeConfig {
            horizon,
            rho: self.rho,
            time_scale: self.episode_len,
            threshold: self.threshold,
        }
    }
}

/// The fixed starting point of an experiment: true and assumed parameters,
/// the shared first batch and the model fitted on it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub truth: DgpParams,
    pub true_drift: DriftConfig,
    pub assumed_theta: DgpParams,
    pub assumed_drift: DriftConfig,
    /// `Δ_1` with every covariate of the truth.
    first_full: Batch,
    /// `Δ_1` as the classifier sees it.
    pub first: Arc<Batch>,
    pub initial: LogisticModel,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let d = cfg.covariate_dim;
        let mut rng = stream_rng(cfg.master_seed, Stream::Theta, 0);
        let coefficients: Vec<f64> = (0..d)
            .map(|_| cfg.coefficient_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut truth = DgpParams::linear(cfg.intercept, coefficients);
        if cfg.scenario == ScenarioKind::Misspecified {
            let mut term = || cfg.extended_std * rng.sample::<f64, _>(StandardNormal);
            truth = truth.with_extended(ExtendedTerms {
                interaction: term(),
                quadratic: term(),
                extra: term(),
            });
        }
        let first_full = drift::generate_batch(
            &truth,
            cfg.batch_size,
            1,
            CovariateMode::Resample,
            &mut stream_rng(cfg.master_seed, Stream::Theta, 1),
        )?;
        let first = first_full.observed(d)?;
        let initial = classifier::fit(&first, &cfg.fit_config())?;
        let (assumed_theta, assumed_drift) = match cfg.scenario {
            ScenarioKind::WellSpecified => (truth.clone(), cfg.drift()),
            ScenarioKind::Misspecified => (initial.as_dgp(), cfg.drift().underestimated()),
        };
        Ok(Scenario {
            kind: cfg.scenario,
            truth,
            true_drift: cfg.drift(),
            assumed_theta,
            assumed_drift,
            first_full,
            first: Arc::new(first),
            initial,
        })
    }

    pub fn observed_dim(&self) -> usize {
        self.first.dim()
    }

    fn batches_along(
        &self,
        cfg: &ExperimentConfig,
        theta: &DgpParams,
        phi: &DriftConfig,
        stream: Stream,
        index: u64,
    ) -> Result<(drift::DriftPath, Vec<Arc<Batch>>)> {
        let seed = cfg.master_seed;
        let path = drift::generate_drift_path(theta, phi, cfg.horizon, &mut stream_rng(seed, stream, 2 * index))?;
        let mut rng = stream_rng(seed, stream, 2 * index + 1);
        let template = if theta.covariate_dim() == self.first_full.dim() {
            &self.first_full
        } else {
            self.first.as_ref()
        };
        let mut batches = Vec::with_capacity(cfg.horizon);
        batches.push(Arc::clone(&self.first));
        for t in 2..=cfg.horizon {
            let mode = if cfg.fixed_covariates {
                CovariateMode::Fixed(template.covariates())
            } else {
                CovariateMode::Resample
            };
            let b = drift::generate_batch(path.at(t), cfg.batch_size, t, mode, &mut rng)?;
            batches.push(Arc::new(b.observed(self.observed_dim())?));
        }
        Ok((path, batches))
    }

    /// True drift path and observed batches `Δ_1..Δ_T` of evaluation run
    /// `run`.
    pub fn run_data(&self, cfg: &ExperimentConfig, run: usize) -> Result<(drift::DriftPath, Vec<Arc<Batch>>)> {
        self.batches_along(cfg, &self.truth, &self.true_drift, Stream::Drift, run as u64)
    }

    /// Episode of length `T` from the training environment's assumptions,
    /// used for penalty tuning.
    pub fn pilot_batches(&self, cfg: &ExperimentConfig, index: usize) -> Result<Vec<Arc<Batch>>> {
        Ok(self
            .batches_along(cfg, &self.assumed_theta, &self.assumed_drift, Stream::Pilot, index as u64)?
            .1)
    }

    pub fn training_env(&self, cfg: &ExperimentConfig, rho: f64) -> Result<SimulatedEnv> {
        let config = SimEnvConfig {
            theta1: self.assumed_theta.clone(),
            drift: self.assumed_drift,
            episode: EpisodeConfig {
                rho,
                ..cfg.episode(cfg.episode_len)
            },
            fixed_covariates: cfg.fixed_covariates,
            fit: cfg.fit_config(),
        };
        SimulatedEnv::new(
            config,
            (*self.first).clone(),
            self.initial.clone(),
            stream_rng(cfg.master_seed, Stream::Training, 0),
        )
    }
}

/// Hex SHA-256 over the exact bytes of a batch sequence.
pub fn stream_digest(batches: &[Arc<Batch>]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        b.hash_into(&mut h);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Train a fresh policy in the scenario's simulating environment.
pub fn train_policy(cfg: &ExperimentConfig, scenario: &Scenario, rho: f64) -> Result<(Policy, TrainingReport)> {
    let ppo_cfg = cfg.ppo_config();
    let mut env = scenario.training_env(cfg, rho)?;
    let mut policy = Policy::new(
        env.state_dim(),
        &ppo_cfg.hidden_sizes,
        &mut stream_rng(cfg.master_seed, Stream::NetworkInit, 0),
    )?;
    let report = ppo::train_static(
        &mut env,
        &mut policy,
        &ppo_cfg,
        cfg.training_steps,
        &mut stream_rng(cfg.master_seed, Stream::Training, 1),
    )?;
    Ok((policy, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    PpoStatic,
    PpoDynamic,
    Ddm,
    Hddm,
    Random,
    EquallySpaced,
    Always,
    Never,
}

impl StrategyKind {
    /// Table order.
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::PpoStatic,
        StrategyKind::PpoDynamic,
        StrategyKind::Ddm,
        StrategyKind::Hddm,
        StrategyKind::Random,
        StrategyKind::EquallySpaced,
        StrategyKind::Always,
        StrategyKind::Never,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::PpoStatic => "ppo_static",
            StrategyKind::PpoDynamic => "ppo_dynamic",
            StrategyKind::Ddm => "ddm",
            StrategyKind::Hddm => "hddm",
            StrategyKind::Random => "random",
            StrategyKind::EquallySpaced => "equally_spaced",
            StrategyKind::Always => "always",
            StrategyKind::Never => "never",
        }
    }

    /// Whether the strategy needs the calibration from `ppo_static`.
    fn calibrated(self) -> bool {
        matches!(self, StrategyKind::Random | StrategyKind::EquallySpaced)
    }
}

/// One strategy's episode in one run.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTrace {
    pub strategy: StrategyKind,
    pub trace: EpisodeTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    pub digest: String,
    pub traces: Vec<StrategyTrace>,
}

impl RunOutcome {
    pub fn trace(&self, kind: StrategyKind) -> Option<&EpisodeTrace> {
        self.traces.iter().find(|t| t.strategy == kind).map(|t| &t.trace)
    }
}

/// Refits keyed by time index, shared by all strategies of one run.
struct FitCache {
    fits: Vec<Option<LogisticModel>>,
    config: FitConfig,
}

impl FitCache {
    fn new(horizon: usize, config: FitConfig) -> Self {
        FitCache {
            fits: vec![None; horizon + 1],
            config,
        }
    }

    fn get(&mut self, batch: &Batch) -> Result<LogisticModel> {
        let slot = self.fits.get_mut(batch.time_index()).ok_or(Error::NonSequentialStep {
            expected: 1,
            got: batch.time_index(),
        })?;
        if slot.is_none() {
            *slot = Some(classifier::fit(batch, &self.config)?);
        }
        Ok(slot.clone().expect("filled above"))
    }
}

struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    scenario: &'a Scenario,
    policy: &'a Policy,
    calibration: Option<Calibration>,
}

impl Evaluator<'_> {
    fn strategy(&self, kind: StrategyKind, run: usize) -> Result<Box<dyn UpdateStrategy>> {
        let cfg = self.cfg;
        // Both learned strategies share the action-sampling stream, so they
        // act identically until the dynamic one first updates its policy.
        let policy_rng = || stream_rng(cfg.master_seed, Stream::Policy, run as u64);
        let baseline_rng = || stream_rng(cfg.master_seed, Stream::Baseline, run as u64);
        let calibration = || {
            self.calibration
                .ok_or_else(|| Error::Config("schedule baselines need a calibration".into()))
        };
        Ok(match kind {
            StrategyKind::PpoStatic => Box::new(PolicyStrategy::new(
                kind.name(),
                self.policy.clone(),
                cfg.act_mode(),
                policy_rng(),
            )),
            StrategyKind::PpoDynamic => Box::new(DynamicPpo::new(
                kind.name(),
                self.policy.clone(),
                cfg.dynamic_config(),
                cfg.act_mode(),
                policy_rng(),
            )?),
            StrategyKind::Ddm => Box::new(DetectorStrategy::new(
                kind.name(),
                Ddm::new(cfg.ddm_min_samples, cfg.ddm_warning_level, cfg.ddm_drift_level),
            )),
            StrategyKind::Hddm => Box::new(DetectorStrategy::new(
                kind.name(),
                HddmA::new(cfg.hddm_drift_confidence, cfg.hddm_warning_confidence)?,
            )),
            StrategyKind::Random => Box::new(ScheduleStrategy::new(
                kind.name(),
                Schedule::Random { p: calibration()?.p },
                baseline_rng(),
            )?),
            StrategyKind::EquallySpaced => Box::new(ScheduleStrategy::new(
                kind.name(),
                Schedule::EquallySpaced { k: calibration()?.k },
                baseline_rng(),
            )?),
            StrategyKind::Always => Box::new(ScheduleStrategy::new(kind.name(), Schedule::Always, baseline_rng())?),
            StrategyKind::Never => Box::new(ScheduleStrategy::new(kind.name(), Schedule::Never, baseline_rng())?),
        })
    }

    fn run(&self, run: usize, kinds: &[StrategyKind]) -> Result<RunOutcome> {
        let (_, batches) = self.scenario.run_data(self.cfg, run)?;
        let digest = stream_digest(&batches);
        let mut cache = FitCache::new(self.cfg.horizon, self.cfg.fit_config());
        let mut traces = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let mut strategy = self.strategy(kind, run)?;
            let mut fitter = |b: &Batch| cache.get(b);
            let trace = mdp::run_episode(
                &batches,
                self.scenario.initial.clone(),
                &mut fitter,
                strategy.as_mut(),
                self.cfg.episode(self.cfg.horizon),
            )?;
            traces.push(StrategyTrace { strategy: kind, trace });
        }
        Ok(RunOutcome { run, digest, traces })
    }
}

/// Per (strategy, μ) summary over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub mu: f64,
    pub mean_utility: f64,
    pub stderr: f64,
    pub mean_updates: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Mean and standard error (`ddof = 1`, divided by `√n`). With a single
/// value the error is reported as 0.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl ResultTable {
    pub fn from_runs(runs: &[RunOutcome], kinds: &[StrategyKind], mu_grid: &[f64]) -> Self {
        if runs.len() == 1 {
            log::warn!("a single run: standard errors are reported as 0");
        }
        let mut rows = Vec::with_capacity(kinds.len() * mu_grid.len());
        for &kind in kinds {
            let traces: Vec<&EpisodeTrace> = runs.iter().filter_map(|r| r.trace(kind)).collect();
            if traces.is_empty() {
                continue;
            }
            let updates: Vec<f64> = traces.iter().map(|t| t.update_count() as f64).collect();
            let mean_updates = updates.iter().sum::<f64>() / updates.len() as f64;
            for &mu in mu_grid {
                let utilities: Vec<f64> = traces.iter().map(|t| t.cumulative_utility(mu)).collect();
                let (mean_utility, stderr) = mean_and_stderr(&utilities);
                rows.push(ResultRow {
                    strategy: kind.name().to_string(),
                    mu,
                    mean_utility,
                    stderr,
                    mean_updates,
                });
            }
        }
        ResultTable { rows }
    }

    pub fn get(&self, strategy: &str, mu: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.mu == mu)
    }

    pub fn strategies(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.strategy.as_str()) {
                names.push(&r.strategy);
            }
        }
        names
    }

    pub fn mus(&self) -> Vec<f64> {
        let mut mus: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !mus.contains(&r.mu) {
                mus.push(r.mu);
            }
        }
        mus
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(ResultTable { rows })
    }

    /// One row per strategy, one column per μ with `mean (stderr)`, and the
    /// mean update count.
    pub fn to_markdown(&self) -> String {
        let mus = self.mus();
        let mut out = String::from("| Strategy |");
        for mu in &mus {
            out.push_str(&format!(" μ = {mu} |"));
        }
        out.push_str(" Mean updates |\n|---|");
        out.push_str(&"---:|".repeat(mus.len() + 1));
        out.push('\n');
        for s in self.strategies() {
            out.push_str(&format!("| {s} |"));
            let mut updates = 0.0;
            for &mu in &mus {
                match self.get(s, mu) {
                    Some(r) => {
                        out.push_str(&format!(" {:.2} ({:.2}) |", r.mean_utility, r.stderr));
                        updates = r.mean_updates;
                    }
                    None => out.push_str(" |"),
                }
            }
            out.push_str(&format!(" {updates:.2} |\n"));
        }
        out
    }
}

/// Everything produced by [`run_comparison`].
#[derive(Debug, Clone)]
pub struct Comparison {
    pub table: ResultTable,
    pub runs: Vec<RunOutcome>,
    pub calibration: Calibration,
    pub policy: Policy,
    pub training: Option<TrainingReport>,
}

/// Evaluate every strategy on `num_runs` drift runs. Trains the policy
/// first unless one is given. The random and equally spaced schedules are
/// calibrated on the static policy's mean update count, then evaluated in a
/// second pass over regenerated, digest-checked batch streams.
pub fn run_comparison(cfg: &ExperimentConfig, policy: Option<Policy>) -> Result<Comparison> {
    cfg.validate()?;
    let scenario = Scenario::build(cfg)?;
    let (policy, training) = match policy {
        Some(p) => {
            if p.state_dim() != crate::MdpState::len_for(scenario.observed_dim()) {
                return Err(Error::DimensionMismatch {
                    expected: crate::MdpState::len_for(scenario.observed_dim()),
                    got: p.state_dim(),
                });
            }
            (p, None)
        }
        None => {
            log::info!("training policy for {} steps", cfg.training_steps);
            let (p, report) = train_policy(cfg, &scenario, cfg.rho)?;
            (p, Some(report))
        }
    };

    let first_pass: Vec<StrategyKind> = StrategyKind::ALL.iter().copied().filter(|k| !k.calibrated()).collect();
    let second_pass: Vec<StrategyKind> = StrategyKind::ALL.iter().copied().filter(|k| k.calibrated()).collect();

    let evaluator = Evaluator {
        cfg,
        scenario: &scenario,
        policy: &policy,
        calibration: None,
    };
    log::info!("evaluating {} runs", cfg.num_runs);
    let mut runs = (0..cfg.num_runs)
        .into_par_iter()
        .map(|r| evaluator.run(r, &first_pass))
        .collect::<Result<Vec<_>>>()?;

    let static_updates: f64 = runs
        .iter()
        .map(|r| r.trace(StrategyKind::PpoStatic).expect("first pass").update_count() as f64)
        .sum::<f64>()
        / runs.len() as f64;
    let calibration = baselines::calibrate(static_updates, cfg.horizon)?;
    log::info!(
        "static policy averages {static_updates:.2} updates: random p = {:.4}, equally spaced k = {}",
        calibration.p,
        calibration.k
    );

    let evaluator = Evaluator {
        calibration: Some(calibration),
        ..evaluator
    };
    let second = (0..cfg.num_runs)
        .into_par_iter()
        .map(|r| evaluator.run(r, &second_pass))
        .collect::<Result<Vec<_>>>()?;
    for (run, extra) in runs.iter_mut().zip(second) {
        assert_eq!(
            run.digest, extra.digest,
            "run {} saw a different batch stream in the second pass",
            run.run
        );
        run.traces.extend(extra.traces);
        run.traces
            .sort_by_key(|t| StrategyKind::ALL.iter().position(|k| *k == t.strategy));
    }

    let table = ResultTable::from_runs(&runs, &StrategyKind::ALL, &cfg.mu_grid);
    Ok(Comparison {
        table,
        runs,
        calibration,
        policy,
        training,
    })
}

#[derive(Debug, Serialize)]
struct TraceRecord<'a> {
    strategy: &'a str,
    t: usize,
    action: u8,
    utility: f64,
    reward: f64,
    last_update: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_reward_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for p in curve {
        w.serialize(p).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `results.csv`, `results.md`, `traces/run_XXX.csv`,
/// `reward_curve.csv` (when the policy was trained), `policy.bin` and the
/// `config.toml` snapshot into `dir`.
pub fn emit_outputs(cmp: &Comparison, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    cmp.table.write_csv(&dir.join("results.csv"))?;

    let mut md = format!(
        "# Cumulative utility, {:?} scenario\n\nT = {}, n = {}, {} runs, rho = {}, master seed {}.\n\
         Random and equally spaced baselines are calibrated to ppo_static: p = {:.6}, k = {}.\n\
         Values are mean (standard error) over runs.\n\n",
        cfg.scenario,
        cfg.horizon,
        cfg.batch_size,
        cfg.num_runs,
        cfg.rho,
        cfg.master_seed,
        cmp.calibration.p,
        cmp.calibration.k
    );
    md.push_str(&cmp.table.to_markdown());
    write_text(&dir.join("results.md"), &md)?;

    let traces = dir.join("traces");
    create_dir(&traces)?;
    for run in &cmp.runs {
        let path = traces.join(format!("run_{:03}.csv", run.run));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        for st in &run.traces {
            let tr = &st.trace;
            for i in 0..tr.actions.len() {
                w.serialize(TraceRecord {
                    strategy: st.strategy.name(),
                    t: i + 1,
                    action: u8::from(tr.actions[i].is_update()),
                    utility: tr.utilities[i],
                    reward: tr.rewards[i],
                    last_update: tr.last_update[i],
                })
                .map_err(|e| Error::csv(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    if let Some(report) = &cmp.training {
        write_reward_curve(&dir.join("reward_curve.csv"), &report.curve)?;
    }
    cmp.policy.save(&dir.join("policy.bin"))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())
}

#[derive(Debug, Clone)]
pub struct TuneReport {
    pub chosen: f64,
    /// Reward curve of the agent trained at each penalty.
    pub curves: Vec<(f64, Vec<CurvePoint>)>,
    /// Pilot utilities; the strategy column names the penalty.
    pub pilot: ResultTable,
    /// Number of μ values each penalty wins.
    pub wins: Vec<(f64, usize)>,
}

/// Pick the penalty whose agent wins at the most μ values on pilot episodes
/// drawn from the training environment. Ties go to the smaller penalty.
pub fn choose_rho(pilot: &ResultTable, grid: &[f64], mu_grid: &[f64]) -> (f64, Vec<(f64, usize)>) {
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut wins: Vec<(f64, usize)> = sorted.iter().map(|r| (*r, 0)).collect();
    for &mu in mu_grid {
        let mut best: Option<(usize, f64)> = None;
        for (i, rho) in sorted.iter().enumerate() {
            if let Some(row) = pilot.get(&rho_label(*rho), mu) {
                if best.is_none_or(|(_, u)| row.mean_utility > u) {
                    best = Some((i, row.mean_utility));
                }
            }
        }
        if let Some((i, _)) = best {
            wins[i].1 += 1;
        }
    }
    let mut chosen = wins[0];
    for w in &wins[1..] {
        if w.1 > chosen.1 {
            chosen = *w;
        }
    }
    (chosen.0, wins)
}

fn rho_label(rho: f64) -> String {
    format!("rho={rho}")
}

pub fn tune_rho(cfg: &ExperimentConfig) -> Result<TuneReport> {
    cfg.validate()?;
    if cfg.rho_grid.len() == 1 {
        return Ok(TuneReport {
            chosen: cfg.rho_grid[0],
            curves: Vec::new(),
            pilot: ResultTable::default(),
            wins: vec![(cfg.rho_grid[0], 0)],
        });
    }
    let scenario = Scenario::build(cfg)?;
    let trained = cfg
        .rho_grid
        .par_iter()
        .map(|&rho| train_policy(cfg, &scenario, rho).map(|(p, r)| (rho, p, r)))
        .collect::<Result<Vec<_>>>()?;
    let pilots = (0..cfg.pilot_runs)
        .into_par_iter()
        .map(|i| scenario.pilot_batches(cfg, i))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (rho, policy, report) in trained {
        let traces = pilots
            .par_iter()
            .enumerate()
            .map(|(i, batches)| {
                let mut strategy = PolicyStrategy::new(
                    "pilot",
                    policy.clone(),
                    cfg.act_mode(),
                    stream_rng(cfg.master_seed, Stream::Pilot, (1 << 40) + i as u64),
                );
                let mut cache = FitCache::new(cfg.horizon, cfg.fit_config());
                let mut fitter = |b: &Batch| cache.get(b);
                mdp::run_episode(
                    batches,
                    scenario.initial.clone(),
                    &mut fitter,
                    &mut strategy,
                    EpisodeConfig {
                        rho,
                        ..cfg.episode(cfg.horizon)
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let updates = traces.iter().map(|t| t.update_count() as f64).sum::<f64>() / traces.len() as f64;
        for &mu in &cfg.mu_grid {
            let utilities: Vec<f64> = traces.iter().map(|t| t.cumulative_utility(mu)).collect();
            let (mean_utility, stderr) = mean_and_stderr(&utilities);
            rows.push(ResultRow {
                strategy: rho_label(rho),
                mu,
                mean_utility,
                stderr,
                mean_updates: updates,
            });
        }
        curves.push((rho, report.curve));
    }
    let pilot = ResultTable { rows };
    let (chosen, wins) = choose_rho(&pilot, &cfg.rho_grid, &cfg.mu_grid);
    Ok(TuneReport {
        chosen,
        curves,
        pilot,
        wins,
    })
}

/// Write `pilot.csv`, `pilot.md`, `reward_curve_rho_<rho>.csv` per penalty
/// and `chosen_rho.txt` into `dir`.
pub fn emit_tuning(report: &TuneReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    report.pilot.write_csv(&dir.join("pilot.csv"))?;
    let mut md = String::from("# Penalty tuning on pilot episodes\n\n");
    md.push_str(&report.pilot.to_markdown());
    md.push_str("\n| rho | μ values won |\n|---:|---:|\n");
    for (rho, w) in &report.wins {
        md.push_str(&format!("| {rho} | {w} |\n"));
    }
    md.push_str(&format!("\nChosen rho: {}\n", report.chosen));
    write_text(&dir.join("pilot.md"), &md)?;
    for (rho, curve) in &report.curves {
        write_reward_curve(&dir.join(format!("reward_curve_rho_{rho}.csv")), curve)?;
    }
    write_text(&dir.join("chosen_rho.txt"), &format!("{}\n", report.chosen))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())
}

/// Write the true drift path and per-batch label rates of every run as
/// `drift_run_XXX.csv`, with the batch-stream digest in `digests.csv`.
pub fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    create_dir(dir)?;
    let scenario = Scenario::build(cfg)?;
    let digests_path = dir.join("digests.csv");
    let mut digests = csv::Writer::from_path(&digests_path).map_err(|e| Error::csv(&digests_path, e))?;
    digests
        .write_record(["run", "digest"])
        .map_err(|e| Error::csv(&digests_path, e))?;
    for run in 0..cfg.num_runs {
        let (path, batches) = scenario.run_data(cfg, run)?;
        let file = dir.join(format!("drift_run_{run:03}.csv"));
        let mut w = csv::Writer::from_path(&file).map_err(|e| Error::csv(&file, e))?;
        let mut header = vec!["t".to_string(), "intercept".to_string()];
        header.extend((1..=scenario.truth.dim()).map(|j| format!("beta_{j}")));
        if scenario.truth.extended_terms.is_some() {
            header.extend(["interaction", "quadratic", "extra"].map(String::from));
        }
        header.push("label_rate".into());
        w.write_record(&header).map_err(|e| Error::csv(&file, e))?;
        for t in 1..=cfg.horizon {
            let mut record = vec![t.to_string()];
            record.extend(path.at(t).to_vec().iter().map(|v| v.to_string()));
            record.push(batches[t - 1].label_mean().to_string());
            w.write_record(&record).map_err(|e| Error::csv(&file, e))?;
        }
        w.flush().map_err(|e| Error::io(&file, e))?;
        digests
            .write_record([run.to_string(), stream_digest(&batches)])
            .map_err(|e| Error::csv(&digests_path, e))?;
    }
    digests.flush().map_err(|e| Error::io(&digests_path, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())
}

/// Gradient check of actor and critic on `nets` freshly initialized
/// policies with the configured architecture, random inputs and random
/// output projections. Returns one report per network.
pub fn gradcheck(cfg: &ExperimentConfig, nets: usize, samples: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let state_dim = crate::MdpState::len_for(cfg.covariate_dim);
    let mut rng = stream_rng(cfg.master_seed, Stream::NetworkInit, 1);
    let mut reports = Vec::with_capacity(2 * nets);
    for i in 0..nets {
        let policy = Policy::new(state_dim, &cfg.ppo_hidden_sizes, &mut rng)?;
        for (name, net) in [("actor", &policy.actor), ("critic", &policy.critic)] {
            let inputs = DMatrix::from_fn(state_dim, samples, |_, _| rng.sample::<f64, _>(StandardNormal));
            let projection =
                DMatrix::from_fn(net.output_dim(), samples, |_, _| rng.sample::<f64, _>(StandardNormal));
            let report = neural::gradient_check(net, &inputs, &projection, 1e-5)?;
            reports.push((format!("{name}_{i}"), report));
        }
    }
    Ok(reports)
}
