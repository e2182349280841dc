//! Fixtures shared by the kernel benchmarks.

use retrain_core::classifier::{self, FitConfig};
use retrain_core::drift::{self, CovariateMode};
use retrain_core::mdp::{EpisodeConfig, SimEnvConfig, SimulatedEnv};
use retrain_core::rng::{stream_rng, Stream};
use retrain_core::{Batch, DgpParams, DriftConfig};

pub fn theta() -> DgpParams {
    DgpParams::linear(0.2, vec![1.0, -0.5, 0.25, 0.8, -1.2])
}

pub fn batch(n: usize, seed: u64) -> Batch {
    drift::generate_batch(&theta(), n, 1, CovariateMode::Resample, &mut stream_rng(seed, Stream::Labels, 0))
        .expect("valid fixture batch")
}

/// Simulating environment with the default drift regime and `J = 200`.
pub fn env(n: usize, seed: u64) -> SimulatedEnv {
    let first = batch(n, seed);
    let initial = classifier::fit(&first, &FitConfig::default()).expect("fixture batch is fittable");
    let config = SimEnvConfig {
        theta1: theta(),
        drift: DriftConfig {
            step_std: 0.05,
            jump_prob: 0.05,
            jump_std: 1.5,
        },
        episode: EpisodeConfig {
            horizon: 200,
            rho: 0.02,
            time_scale: 200,
            threshold: 0.5,
        },
        fixed_covariates: false,
        fit: FitConfig::default(),
    };
    SimulatedEnv::new(config, first, initial, stream_rng(seed, Stream::Training, 0)).expect("valid fixture env")
}
