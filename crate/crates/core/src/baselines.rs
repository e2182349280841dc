//! Comparison strategies: streaming drift detectors run over per-example
//! errors, and fixed update schedules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier;
use crate::mdp::DecisionContext;
use crate::rng::SimRng;
use crate::{Action, Error, Result, UpdateStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftLevel {
    Stable,
    Warning,
    Drift,
}

/// A detector fed one 0/1 error at a time. It resets itself after
/// signalling [`DriftLevel::Drift`].
pub trait DriftDetector {
    fn observe(&mut self, error: bool) -> DriftLevel;
    fn reset(&mut self);
}

/// Drift detection method on the running error rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ddm {
    pub min_samples: usize,
    pub warning_level: f64,
    pub drift_level: f64,
    count: usize,
    p: f64,
    s: f64,
    p_min: f64,
    s_min: f64,
}

impl Default for Ddm {
    fn default() -> Self {
        Ddm::new(30, 2.0, 3.0)
    }
}

impl Ddm {
    pub fn new(min_samples: usize, warning_level: f64, drift_level: f64) -> Self {
        Ddm {
            min_samples,
            warning_level,
            drift_level,
            count: 0,
            p: 0.0,
            s: 0.0,
            p_min: f64::INFINITY,
            s_min: f64::INFINITY,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn error_rate(&self) -> f64 {
        self.p
    }

    /// `p_min + s_min`, infinite until the warm-up is over.
    pub fn min_level(&self) -> f64 {
        self.p_min + self.s_min
    }
}

impl DriftDetector for Ddm {
    fn observe(&mut self, error: bool) -> DriftLevel {
        self.count += 1;
        let n = self.count as f64;
        self.p += (f64::from(u8::from(error)) - self.p) / n;
        self.s = (self.p * (1.0 - self.p) / n).sqrt();
        if self.count < self.min_samples {
            return DriftLevel::Stable;
        }
        let level = self.p + self.s;
        if level < self.p_min + self.s_min {
            self.p_min = self.p;
            self.s_min = self.s;
        }
        // Strict comparisons: an error-free stream has p = s = 0 and must
        // not fire.
        if level > self.p_min + self.drift_level * self.s_min {
            self.reset();
            DriftLevel::Drift
        } else if level > self.p_min + self.warning_level * self.s_min {
            DriftLevel::Warning
        } else {
            DriftLevel::Stable
        }
    }

    fn reset(&mut self) {
        *self = Ddm::new(self.min_samples, self.warning_level, self.drift_level);
    }
}

/// Hoeffding-bound drift detector with moving averages (A-test), testing
/// one-sidedly for an increase of the error rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HddmA {
    pub drift_confidence: f64,
    pub warning_confidence: f64,
    total_n: f64,
    total_sum: f64,
    cut_n: f64,
    cut_sum: f64,
}

impl Default for HddmA {
    fn default() -> Self {
        HddmA::new(0.001, 0.005).expect("valid defaults")
    }
}

impl HddmA {
    pub fn new(drift_confidence: f64, warning_confidence: f64) -> Result<Self> {
        if !(drift_confidence > 0.0 && drift_confidence <= warning_confidence && warning_confidence < 1.0) {
            return Err(Error::Config("HDDM confidences must satisfy 0 < drift <= warning < 1".into()));
        }
        Ok(HddmA {
            drift_confidence,
            warning_confidence,
            total_n: 0.0,
            total_sum: 0.0,
            cut_n: 0.0,
            cut_sum: 0.0,
        })
    }

    fn bound(n: f64, confidence: f64) -> f64 {
        (1.0 / (2.0 * n) * (1.0 / confidence).ln()).sqrt()
    }

    /// Whether the mean since the cut point exceeds the mean up to it by
    /// more than the Hoeffding bound at `confidence`.
    fn mean_increased(&self, confidence: f64) -> bool {
        if self.cut_n == self.total_n {
            return false;
        }
        let m = (self.total_n - self.cut_n) / (self.cut_n * self.total_n);
        let eps = (m / 2.0 * (2.0 / confidence).ln()).sqrt();
        self.total_sum / self.total_n - self.cut_sum / self.cut_n >= eps
    }
}

impl DriftDetector for HddmA {
    fn observe(&mut self, error: bool) -> DriftLevel {
        self.total_n += 1.0;
        self.total_sum += f64::from(u8::from(error));
        let alpha = self.drift_confidence;
        if self.cut_n == 0.0
            || self.total_sum / self.total_n + Self::bound(self.total_n, alpha)
                <= self.cut_sum / self.cut_n + Self::bound(self.cut_n, alpha)
        {
            self.cut_n = self.total_n;
            self.cut_sum = self.total_sum;
        }
        if self.mean_increased(self.drift_confidence) {
            self.reset();
            DriftLevel::Drift
        } else if self.mean_increased(self.warning_confidence) {
            DriftLevel::Warning
        } else {
            DriftLevel::Stable
        }
    }

    fn reset(&mut self) {
        *self = HddmA::new(self.drift_confidence, self.warning_confidence).expect("validated");
    }
}

/// Runs a detector over the incumbent's per-example errors on each batch, in
/// row order. The first drift signal triggers an update.
#[derive(Debug, Clone)]
pub struct DetectorStrategy<D> {
    name: String,
    detector: D,
}

impl<D: DriftDetector> DetectorStrategy<D> {
    pub fn new(name: impl Into<String>, detector: D) -> Self {
        DetectorStrategy {
            name: name.into(),
            detector,
        }
    }

    pub fn detector(&self) -> &D {
        &self.detector
    }

    /// Stream `errors` and report whether drift fired. The detector is left
    /// reset when it did.
    pub fn scan(&mut self, errors: &[bool]) -> bool {
        for &e in errors {
            if self.detector.observe(e) == DriftLevel::Drift {
                self.detector.reset();
                return true;
            }
        }
        false
    }
}

impl<D: DriftDetector> UpdateStrategy for DetectorStrategy<D> {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action> {
        let errors = classifier::errors(ctx.incumbent, ctx.batch, ctx.threshold)?;
        Ok(if self.scan(&errors) {
            Action::Update
        } else {
            Action::Keep
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// Update with probability `p` at every step.
    Random { p: f64 },
    /// Exactly `k` updates, evenly spaced over `2..=T`.
    EquallySpaced { k: usize },
    Always,
    Never,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Random { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("update probability {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Update times `floor((T − 1)·i / (k + 1)) + 1` for `i = 1..=k`, or every
/// step of `2..=T` when `k ≥ T − 1`.
pub fn equally_spaced_points(k: usize, horizon: usize) -> Vec<usize> {
    if horizon < 2 {
        return Vec::new();
    }
    if k >= horizon - 1 {
        return (2..=horizon).collect();
    }
    (1..=k).map(|i| (horizon - 1) * i / (k + 1) + 1).collect()
}

#[derive(Debug, Clone)]
pub struct ScheduleStrategy {
    name: String,
    schedule: Schedule,
    rng: SimRng,
    /// Cached update times for the horizon they were computed for.
    points: Option<(usize, Vec<usize>)>,
}

impl ScheduleStrategy {
    pub fn new(name: impl Into<String>, schedule: Schedule, rng: SimRng) -> Result<Self> {
        schedule.validate()?;
        Ok(ScheduleStrategy {
            name: name.into(),
            schedule,
            rng,
            points: None,
        })
    }

    pub fn action(&mut self, t: usize, horizon: usize) -> Action {
        let update = match self.schedule {
            Schedule::Random { p } => self.rng.random::<f64>() < p,
            Schedule::EquallySpaced { k } => {
                let stale = self.points.as_ref().is_none_or(|(h, _)| *h != horizon);
                if stale {
                    self.points = Some((horizon, equally_spaced_points(k, horizon)));
                }
                let (_, pts) = self.points.as_ref().expect("just filled");
                pts.binary_search(&t).is_ok()
            }
            Schedule::Always => true,
            Schedule::Never => false,
        };
        if update {
            Action::Update
        } else {
            Action::Keep
        }
    }
}

impl UpdateStrategy for ScheduleStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action> {
        Ok(self.action(ctx.t, ctx.horizon))
    }
}

/// Schedule parameters matched to a reference strategy's mean number of
/// charged updates over a horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `mean_updates / (T − 1)`.
    pub p: f64,
    /// `floor(mean_updates)`.
    pub k: usize,
}

pub fn calibrate(mean_updates: f64, horizon: usize) -> Result<Calibration> {
    if horizon < 2 {
        return Err(Error::Config("horizon must be at least 2".into()));
    }
    let steps = (horizon - 1) as f64;
    if !(0.0..=steps).contains(&mean_updates) {
        return Err(Error::Config(format!("mean update count {mean_updates} outside [0, {steps}]")));
    }
    Ok(Calibration {
        p: mean_updates / steps,
        k: mean_updates.floor() as usize,
    })
}
