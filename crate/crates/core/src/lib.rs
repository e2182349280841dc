//! Learning *when* to retrain a classifier that lives under concept drift.
//!
//! The crate couples a simulated drift environment (a logistic data
//! generating process whose parameters follow a random walk with rare
//! shocks) with a proximal policy optimization agent that decides at every
//! batch whether to refit the deployed logistic-regression model. The agent
//! is benchmarked against drift detectors (DDM, HDDM) and fixed schedules on
//! cumulative utility under an explicit per-update cost.
//!
//! Module map:
//!
//! * [`drift`]: covariates, the data generating process and drift paths.
//! * [`classifier`]: IRLS logistic regression and per-batch metrics.
//! * [`mdp`]: states, rewards, update bookkeeping and the step/reset environment.
//! * [`neural`]: a small dense network with exact backprop and Adam.
//! * [`ppo`]: rollouts, GAE, the clipped surrogate and the static/dynamic loops.
//! * [`baselines`]: DDM, HDDM and schedule strategies.
//! * [`harness`]: configuration, multi-run comparison, tuning and outputs.

pub mod baselines;
pub mod classifier;
pub mod drift;
mod error;
pub mod harness;
pub mod mdp;
pub mod neural;
pub mod ppo;
pub mod rng;

pub use classifier::{LogisticModel, MetricSet};
pub use drift::{Batch, DgpParams, DriftConfig, DriftPath};
pub use error::{Error, Result};
pub use mdp::{Action, MdpState, UpdateStrategy};
pub use neural::Mlp;
pub use ppo::{Policy, PpoConfig};


