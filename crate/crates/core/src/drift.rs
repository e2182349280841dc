//! Synthetic drifting data: covariates, the logistic data generating process
//! and random-walk parameter paths with occasional sudden shocks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Coefficients of the non-linear terms used by the misspecified truth:
/// `interaction·x1·x2 + quadratic·x3² + extra·x_{d+1}` where `x_{d+1}` is a
/// covariate the deployed classifier never observes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedTerms {
    pub interaction: f64,
    pub quadratic: f64,
    pub extra: f64,
}

/// Parameters `θ` of the data generating process `Pr(Y = 1 | X = x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub extended_terms: Option<ExtendedTerms>,
}

impl DgpParams {
    pub fn linear(intercept: f64, coefficients: Vec<f64>) -> Self {
        DgpParams {
            intercept,
            coefficients,
            extended_terms: None,
        }
    }

    pub fn with_extended(mut self, terms: ExtendedTerms) -> Self {
        self.extended_terms = Some(terms);
        self
    }

    /// Number of linear coefficients.
    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    /// Number of covariate columns a batch drawn from these parameters has.
    pub fn covariate_dim(&self) -> usize {
        self.dim() + usize::from(self.extended_terms.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.is_empty() {
            return Err(Error::Config("DGP needs at least one coefficient".into()));
        }
        if self.extended_terms.is_some() && self.dim() < 3 {
            return Err(Error::Config(
                "extended terms reference x1, x2 and x3; need at least 3 coefficients".into(),
            ));
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::Config("DGP parameters must be finite".into()));
        }
        Ok(())
    }

    /// Flat layout `[intercept, coefficients.., interaction, quadratic, extra]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 4);
        v.push(self.intercept);
        v.extend_from_slice(&self.coefficients);
        if let Some(e) = self.extended_terms {
            v.extend_from_slice(&[e.interaction, e.quadratic, e.extra]);
        }
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec) using `self` as the shape template.
    pub fn from_flat_like(&self, flat: &[f64]) -> DgpParams {
        let d = self.dim();
        debug_assert_eq!(flat.len(), self.to_vec().len());
        DgpParams {
            intercept: flat[0],
            coefficients: flat[1..=d].to_vec(),
            extended_terms: self.extended_terms.map(|_| ExtendedTerms {
                interaction: flat[d + 1],
                quadratic: flat[d + 2],
                extra: flat[d + 3],
            }),
        }
    }

    fn linear_predictor(&self, row: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = self.intercept
            + self
                .coefficients
                .iter()
                .zip(row)
                .map(|(b, x)| b * x)
                .sum::<f64>();
        if let Some(e) = self.extended_terms {
            z += e.interaction * row[0] * row[1] + e.quadratic * row[2] * row[2] + e.extra * row[d];
        }
        z
    }
}

/// Drift process `D(φ)`: a per-coordinate Gaussian random walk, plus at each
/// step with probability `jump_prob` an extra Gaussian shock of scale
/// `jump_std` on every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub step_std: f64,
    pub jump_prob: f64,
    pub jump_std: f64,
}

impl DriftConfig {
    pub const NONE: DriftConfig = DriftConfig {
        step_std: 0.0,
        jump_prob: 0.0,
        jump_std: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.jump_prob) {
            return Err(Error::Config(format!(
                "jump_prob must lie in [0, 1], got {}",
                self.jump_prob
            )));
        }
        if !(self.step_std >= 0.0 && self.jump_std >= 0.0) {
            return Err(Error::Config(
                "step_std and jump_std must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// The drift a practitioner would assume when underestimating the true
    /// process: half the random-walk scale and no sudden shocks.
    pub fn underestimated(&self) -> DriftConfig {
        DriftConfig {
            step_std: self.step_std / 2.0,
            jump_prob: 0.0,
            jump_std: 0.0,
        }
    }
}

/// `θ_1, …, θ_J`; `params[0]` is the starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPath {
    pub params: Vec<DgpParams>,
}

impl DriftPath {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters at 1-based time `t`.
    pub fn at(&self, t: usize) -> &DgpParams {
        &self.params[t - 1]
    }
}

/// One time step's dataset `Δ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    covariates: DMatrix<f64>,
    labels: Vec<u8>,
    time_index: usize,
}

impl Batch {
    pub fn new(covariates: DMatrix<f64>, labels: Vec<u8>, time_index: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if covariates.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: covariates.nrows(),
            });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        Ok(Batch {
            covariates,
            labels,
            time_index,
        })
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn label_mean(&self) -> f64 {
        self.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / self.len() as f64
    }

    /// The same rows restricted to the first `d` covariate columns, i.e. what
    /// a model that cannot see the remaining covariates observes.
    pub fn observed(&self, d: usize) -> Result<Batch> {
        if d > self.dim() || d == 0 {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: d,
            });
        }
        Ok(Batch {
            covariates: self.covariates.columns(0, d).into_owned(),
            labels: self.labels.clone(),
            time_index: self.time_index,
        })
    }

    /// Feed the batch's exact bytes into a running digest.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update((self.time_index as u64).to_le_bytes());
        hasher.update((self.covariates.nrows() as u64).to_le_bytes());
        hasher.update((self.covariates.ncols() as u64).to_le_bytes());
        for v in self.covariates.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(&self.labels);
    }
}

/// Where the covariates of a generated batch come from.
#[derive(Debug, Clone, Copy)]
pub enum CovariateMode<'a> {
    /// Fresh standard-normal covariates for every batch.
    Resample,
    /// Reuse a supplied matrix (only the labels are redrawn).
    Fixed(&'a DMatrix<f64>),
}

/// Stable logistic function, clamped into the open unit interval.
pub fn sigmoid(z: f64) -> f64 {
    const LO: f64 = f64::MIN_POSITIVE;
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(LO, HI)
}

/// `n × d` matrix of i.i.d. standard normal draws, filled row by row.
pub fn sample_covariates<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    x
}

/// `Pr(Y = 1 | X = x_i; θ)` for every row of `x`.
pub fn logistic_response(x: &DMatrix<f64>, theta: &DgpParams) -> Result<Vec<f64>> {
    if x.ncols() != theta.covariate_dim() {
        return Err(Error::DimensionMismatch {
            expected: theta.covariate_dim(),
            got: x.ncols(),
        });
    }
    let mut row = vec![0.0; x.ncols()];
    Ok((0..x.nrows())
        .map(|i| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[(i, j)];
            }
            sigmoid(theta.linear_predictor(&row))
        })
        .collect())
}

/// Sample `θ_1..θ_J` from the drift process starting at `theta1`.
///
/// The random stream consumed per step does not depend on whether a shock
/// fires, so `jump_std = 0` reproduces the pure random walk bit for bit.
pub fn generate_drift_path<R: Rng + ?Sized>(
    theta1: &DgpParams,
    phi: &DriftConfig,
    horizon: usize,
    rng: &mut R,
) -> Result<DriftPath> {
    if horizon == 0 {
        return Err(Error::Config("drift path horizon must be at least 1".into()));
    }
    phi.validate()?;
    theta1.validate()?;
    let mut params = Vec::with_capacity(horizon);
    params.push(theta1.clone());
    let mut current = theta1.to_vec();
    let mut shock = vec![0.0; current.len()];
    for _ in 1..horizon {
        for c in current.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += phi.step_std * z;
        }
        let jump = rng.random::<f64>() < phi.jump_prob;
        for s in shock.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s = phi.jump_std * z;
        }
        if jump {
            for (c, s) in current.iter_mut().zip(&shock) {
                *c += s;
            }
        }
        params.push(theta1.from_flat_like(&current));
    }
    Ok(DriftPath { params })
}

/// Draw `Δ_t`: covariates per `mode`, labels `Bernoulli(m(x; θ_t))`.
pub fn generate_batch<R: Rng + ?Sized>(
    theta: &DgpParams,
    n: usize,
    time_index: usize,
    mode: CovariateMode<'_>,
    rng: &mut R,
) -> Result<Batch> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let covariates = match mode {
        CovariateMode::Resample => sample_covariates(n, theta.covariate_dim(), rng),
        CovariateMode::Fixed(x) => {
            if x.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: x.nrows(),
                });
            }
            x.clone()
        }
    };
    let probs = logistic_response(&covariates, theta)?;
    let labels = probs
        .iter()
        .map(|&p| u8::from(rng.random::<f64>() < p))
        .collect();
    Batch::new(covariates, labels, time_index)
}
