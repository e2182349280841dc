//! The deployed classifier: logistic regression fitted by iteratively
//! reweighted least squares, and the per-batch metrics derived from it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::drift::{sigmoid, Batch, DgpParams};
use crate::{Error, Result};

/// Bounds applied to predicted probabilities inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub ridge: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            ridge: 1e-8,
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
    /// Time index of the batch the model was trained on.
    pub fit_time_index: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// The model read as data-generating parameters, e.g. to seed a
    /// simulator from a fitted initial model.
    pub fn as_dgp(&self) -> DgpParams {
        DgpParams::linear(self.intercept, self.weights.clone())
    }

    fn linear_predictor(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * x[(i, j)])
                .sum::<f64>()
    }
}

/// Accuracy (the utility `η`), precision, recall and cross-entropy of a
/// model on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub cross_entropy: f64,
}

/// Penalized maximum-likelihood fit on `batch`.
///
/// A batch whose labels are all equal has no finite MLE; the ridge keeps
/// every Newton step finite, and `converged` reports whether the step
/// tolerance was met before `max_iterations`. A rank-deficient design is
/// rejected.
pub fn fit(batch: &Batch, config: &FitConfig) -> Result<LogisticModel> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "need at least 2 samples to fit, got {n}"
        )));
    }
    let design = batch.covariates().clone().insert_column(0, 1.0);
    let p = design.ncols();
    let y = DVector::from_iterator(n, batch.labels().iter().map(|&v| f64::from(v)));

    let gram = design.tr_mul(&design);
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::DegenerateBatch(
            "design matrix is rank deficient".into(),
        ));
    }

    let mut beta = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut weighted = design.clone();
    for _ in 0..config.max_iterations {
        let eta = &design * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row.copy_from(&design.row(i));
            row *= w[i];
        }
        let mut hessian = design.tr_mul(&weighted);
        for k in 0..p {
            hessian[(k, k)] += config.ridge;
        }
        let gradient = design.tr_mul(&(&y - &mu)) - &beta * config.ridge;
        let step = hessian
            .cholesky()
            .ok_or_else(|| Error::DegenerateBatch("IRLS Hessian is not positive definite".into()))?
            .solve(&gradient);
        beta += &step;
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBatch("IRLS diverged".into()));
        }
        if step.amax() < config.tolerance {
            converged = true;
            break;
        }
    }

    Ok(LogisticModel {
        intercept: beta[0],
        weights: beta.iter().skip(1).copied().collect(),
        fit_time_index: batch.time_index(),
        converged,
    })
}

pub fn predict_proba(model: &LogisticModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x.ncols(),
        });
    }
    Ok((0..x.nrows())
        .map(|i| sigmoid(model.linear_predictor(x, i)))
        .collect())
}

/// Metrics of `model` on `batch` at a decision `threshold`.
///
/// Precision is 0 when nothing is predicted positive; recall is 0 when the
/// batch holds no positives.
pub fn evaluate(model: &LogisticModel, batch: &Batch, threshold: f64) -> Result<MetricSet> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let probs = predict_proba(model, batch.covariates())?;
    Ok(metrics_from_probabilities(&probs, batch.labels(), threshold))
}

/// Metrics from raw probabilities and labels.
pub fn metrics_from_probabilities(probs: &[f64], labels: &[u8], threshold: f64) -> MetricSet {
    debug_assert_eq!(probs.len(), labels.len());
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    let mut ce = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let predicted = p >= threshold;
        match (predicted, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
        let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        ce -= if y == 1 { q.ln() } else { (1.0 - q).ln() };
    }
    let n = probs.len() as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    MetricSet {
        accuracy: (tp + tn) as f64 / n,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        cross_entropy: ce / n,
    }
}

/// Per-row misclassification indicators, in row order.
pub fn errors(model: &LogisticModel, batch: &Batch, threshold: f64) -> Result<Vec<bool>> {
    let probs = predict_proba(model, batch.covariates())?;
    Ok(probs
        .iter()
        .zip(batch.labels())
        .map(|(&p, &y)| (p >= threshold) != (y == 1))
        .collect())
}

/// The utility `η(Δ, C)`: correct-classification rate.
pub fn utility(model: &LogisticModel, batch: &Batch, threshold: f64) -> Result<f64> {
    Ok(evaluate(model, batch, threshold)?.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{generate_batch, logistic_response, CovariateMode};
    use crate::rng::{stream_rng, Stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model(intercept: f64, weights: Vec<f64>) -> LogisticModel {
        LogisticModel {
            intercept,
            weights,
            fit_time_index: 1,
            converged: true,
        }
    }

    fn sample(theta: &DgpParams, n: usize, seed: u64) -> Batch {
        generate_batch(theta, n, 1, CovariateMode::Resample, &mut stream_rng(seed, Stream::Labels, 0)).unwrap()
    }

    #[test]
    fn irls_recovers_generating_parameters() {
        let theta = DgpParams::linear(0.5, vec![1.0, -1.0, 0.5, 0.0, 2.0]);
        let batch = sample(&theta, 50_000, 21);
        let m = fit(&batch, &FitConfig::default()).unwrap();
        assert!(m.converged);
        assert!((m.intercept - 0.5).abs() < 0.05, "{}", m.intercept);
        for (w, t) in m.weights.iter().zip(&theta.coefficients) {
            assert!((w - t).abs() < 0.05, "{w} vs {t}");
        }
    }

    /// Plain full-batch gradient descent on the same penalized likelihood.
    fn gradient_descent_fit(batch: &Batch, ridge: f64) -> Vec<f64> {
        let x = batch.covariates();
        let (n, d) = (x.nrows(), x.ncols());
        let mut beta = vec![0.0; d + 1];
        for _ in 0..20_000 {
            let mut grad = vec![0.0; d + 1];
            for i in 0..n {
                let mut z = beta[0];
                for j in 0..d {
                    z += beta[j + 1] * x[(i, j)];
                }
                let r = 1.0 / (1.0 + (-z).exp()) - f64::from(batch.labels()[i]);
                grad[0] += r;
                for j in 0..d {
                    grad[j + 1] += r * x[(i, j)];
                }
            }
            let mut max_step = 0.0f64;
            for k in 0..=d {
                let step = 2.0 * (grad[k] + ridge * beta[k]) / n as f64;
                beta[k] -= step;
                max_step = max_step.max(step.abs());
            }
            if max_step < 1e-12 {
                break;
            }
        }
        beta
    }

    #[test]
    fn irls_matches_gradient_descent() {
        let theta = DgpParams::linear(-0.2, vec![0.8, -0.4, 0.3, 1.1, -0.9]);
        let batch = sample(&theta, 1500, 8);
        let m = fit(&batch, &FitConfig::default()).unwrap();
        let gd = gradient_descent_fit(&batch, 1e-8);
        assert!((m.intercept - gd[0]).abs() < 1e-4);
        for (w, g) in m.weights.iter().zip(&gd[1..]) {
            assert!((w - g).abs() < 1e-4, "{w} vs {g}");
        }
    }

    #[test]
    fn all_positive_labels_stay_finite() {
        let x = crate::drift::sample_covariates(40, 3, &mut stream_rng(2, Stream::Covariates, 0));
        let batch = Batch::new(x, vec![1; 40], 4).unwrap();
        let m = fit(&batch, &FitConfig::default()).unwrap();
        assert!(m.intercept.is_finite() && m.intercept > 0.0);
        assert!(m.weights.iter().all(|w| w.is_finite()));
        // The ridge gives the penalized likelihood a finite optimum, so the
        // fit may or may not reach it within the iteration budget.
        let capped = fit(&batch, &FitConfig { max_iterations: 3, ..FitConfig::default() }).unwrap();
        assert!(!capped.converged && capped.intercept.is_finite());
        assert_eq!(m.fit_time_index, 4);
    }

    #[test]
    fn refit_is_deterministic() {
        let batch = sample(&DgpParams::linear(0.0, vec![1.0; 5]), 500, 3);
        assert_eq!(fit(&batch, &FitConfig::default()).unwrap(), fit(&batch, &FitConfig::default()).unwrap());
    }

    #[test]
    fn singular_design_and_tiny_batches_rejected() {
        let mut x = crate::drift::sample_covariates(30, 3, &mut stream_rng(2, Stream::Covariates, 0));
        let c0 = x.column(0).clone_owned();
        x.set_column(2, &c0);
        let labels = (0..30).map(|i| (i % 2) as u8).collect();
        let batch = Batch::new(x, labels, 1).unwrap();
        assert!(matches!(fit(&batch, &FitConfig::default()), Err(Error::DegenerateBatch(_))));

        let one = Batch::new(DMatrix::from_element(1, 2, 0.3), vec![1], 1).unwrap();
        assert!(matches!(fit(&one, &FitConfig::default()), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn zero_model_predicts_half() {
        let x = DMatrix::from_fn(4, 5, |i, j| (i * j) as f64 - 3.0);
        let p = predict_proba(&model(0.0, vec![0.0; 5]), &x).unwrap();
        assert_eq!(p, vec![0.5; 4]);
    }

    #[test]
    fn model_equal_to_truth_reproduces_response() {
        let theta = DgpParams::linear(0.3, vec![1.0, -2.0, 0.5, 0.0, 0.7]);
        let x = crate::drift::sample_covariates(100, 5, &mut stream_rng(9, Stream::Covariates, 0));
        let m = model(theta.intercept, theta.coefficients.clone());
        assert_eq!(predict_proba(&m, &x).unwrap(), logistic_response(&x, &theta).unwrap());
    }

    #[test]
    fn predictions_monotone_in_positive_feature() {
        let m = model(0.1, vec![0.8, 0.0]);
        let x = DMatrix::from_fn(20, 2, |i, j| if j == 0 { i as f64 * 0.3 - 3.0 } else { 1.0 });
        let p = predict_proba(&m, &x).unwrap();
        assert!(p.windows(2).all(|w| w[1] > w[0]));
        assert!(predict_proba(&m, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn perfect_separation_metrics() {
        let probs = [0.99, 0.99, 0.01, 0.01, 0.99];
        let labels = [1, 1, 0, 0, 1];
        let m = metrics_from_probabilities(&probs, &labels, 0.5);
        assert_eq!((m.accuracy, m.precision, m.recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_half_probability_cross_entropy() {
        let probs = [0.5; 8];
        let labels = [1, 0, 1, 0, 1, 0, 1, 0];
        let m = metrics_from_probabilities(&probs, &labels, 0.5);
        assert_abs_diff_eq!(m.cross_entropy, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn no_positive_predictions_confusion_matrix() {
        // Hand-built 10-row batch: 4 positives, every prediction negative.
        // Confusion matrix: tp 0, fp 0, tn 6, fn 4.
        let probs = [0.1, 0.2, 0.3, 0.4, 0.45, 0.05, 0.15, 0.25, 0.35, 0.49];
        let labels = [1, 0, 1, 0, 0, 1, 0, 0, 1, 0];
        let m = metrics_from_probabilities(&probs, &labels, 0.5);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_abs_diff_eq!(m.accuracy, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn evaluate_validates_threshold_and_is_pure() {
        let batch = sample(&DgpParams::linear(0.0, vec![1.0; 5]), 200, 4);
        let m = model(0.0, vec![1.0; 5]);
        assert!(evaluate(&m, &batch, 0.0).is_err());
        assert!(evaluate(&m, &batch, 1.0).is_err());
        assert_eq!(evaluate(&m, &batch, 0.5).unwrap(), evaluate(&m, &batch, 0.5).unwrap());
    }

    #[test]
    fn clamped_cross_entropy_is_finite() {
        let m = metrics_from_probabilities(&[0.0, 1.0], &[1, 0], 0.5);
        assert!(m.cross_entropy.is_finite());
        assert_abs_diff_eq!(m.cross_entropy, -(PROB_CLAMP.ln()), epsilon = 1e-4);
    }

    #[test]
    fn truth_minimizes_expected_cross_entropy() {
        let theta = DgpParams::linear(0.4, vec![1.0, -1.0, 0.5, 0.2, -0.6]);
        let batch = sample(&theta, 50_000, 31);
        let truth = model(theta.intercept, theta.coefficients.clone());
        let base = evaluate(&truth, &batch, 0.5).unwrap().cross_entropy;
        let mut rng = stream_rng(31, Stream::Theta, 0);
        for _ in 0..5 {
            use rand::Rng;
            let perturbed = model(
                theta.intercept + rng.random_range(-0.3..0.3),
                theta.coefficients.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect(),
            );
            assert!(evaluate(&perturbed, &batch, 0.5).unwrap().cross_entropy >= base);
        }
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..60),
            seed in any::<u64>(),
        ) {
            let labels: Vec<u8> = probs.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as u8).collect();
            let m = metrics_from_probabilities(&probs, &labels, 0.5);
            for v in [m.accuracy, m.precision, m.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.cross_entropy.is_finite() && m.cross_entropy >= 0.0);
        }
    }
}
