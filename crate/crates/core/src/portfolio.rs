//! Closed-form minimum-variance allocation (plain, return-targeted,
//! ridge-regularized) and the resampled-weights baseline.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::estimators::sample_covariance;
use crate::linalg::column_means;
use crate::rng::{derive_seed, rng_from_seed};
use crate::types::{CovarianceEstimate, ReturnsPanel};

/// Length-N allocation vector constrained to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioWeights {
    w: DVector<f64>,
    meta: BTreeMap<String, f64>,
}

impl PortfolioWeights {
    fn new(w: DVector<f64>) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite portfolio weight".into()));
        }
        let s: f64 = w.sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::Constraint(format!("weights sum to {s}, not 1")));
        }
        Ok(Self { w, meta: BTreeMap::new() })
    }

    fn with_meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn meta(&self) -> &BTreeMap<String, f64> {
        &self.meta
    }
}

/// Diagonal metric of single-asset variances for the ridge penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversificationMetric {
    diag: Vec<f64>,
}

impl DiversificationMetric {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if diag.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Domain("metric entries must be > 0 and finite".into()));
        }
        Ok(Self { diag })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
}

/// Cholesky with a cheap reciprocal-condition screen on the factor diagonal.
fn checked_cholesky(c: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = c.clone().cholesky().ok_or_else(|| {
        Error::Conditioning("covariance is not positive definite".into())
    })?;
    let n = c.nrows();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..n {
        let d = chol.l_dirty()[(i, i)];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let rcond = (lo / hi).powi(2);
    if rcond < 1e-12 {
        return Err(Error::Conditioning(format!(
            "reciprocal condition estimate {rcond:.3e} below 1e-12"
        )));
    }
    Ok(chol)
}

/// w = C^-1 1 / (1' C^-1 1): unique minimizer of w'Cw subject to sum(w) = 1.
pub fn min_variance_weights(cov: &CovarianceEstimate) -> Result<PortfolioWeights> {
    let n = cov.n_assets();
    let chol = checked_cholesky(cov.matrix())?;
    let x = chol.solve(&DVector::from_element(n, 1.0));
    let s: f64 = x.sum();
    if s.abs() < 1e-300 {
        return Err(Error::Conditioning("degenerate normalization 1'C^-1 1 = 0".into()));
    }
    PortfolioWeights::new(x / s).map(|w| w.with_meta("solver", 0.0))
}

/// Minimizer of w'Cw subject to sum(w) = 1 and r_hat'w = r_star, via the
/// two-constraint KKT system.
pub fn min_variance_with_return(
    cov: &CovarianceEstimate,
    r_hat: &DVector<f64>,
    r_star: f64,
) -> Result<PortfolioWeights> {
    let n = cov.n_assets();
    if r_hat.len() != n {
        return Err(Error::Dimension(format!(
            "expected-return vector of length {}, covariance is {n}x{n}",
            r_hat.len()
        )));
    }
    let chol = checked_cholesky(cov.matrix())?;
    let a = chol.solve(&DVector::from_element(n, 1.0));
    let b = chol.solve(r_hat);
    let m11: f64 = a.sum();
    let m12: f64 = b.sum();
    let m21: f64 = r_hat.dot(&a);
    let m22: f64 = r_hat.dot(&b);
    let det = m11 * m22 - m12 * m21;
    let scale = (m11.abs() + m12.abs()) * (m21.abs() + m22.abs());
    if det.abs() <= 1e-12 * scale.max(1e-300) {
        return Err(Error::Constraint(
            "return constraint degenerate (r_hat proportional to the ones vector?)".into(),
        ));
    }
    let mu = (m22 - m12 * r_star) / det;
    let nu = (m11 * r_star - m21) / det;
    PortfolioWeights::new(a * mu + b * nu).map(|w| w.with_meta("solver", 1.0))
}

/// Minimizer of w'Cw + lambda w'Lw subject to sum(w) = 1, identical to
/// [`min_variance_weights`] applied to C + lambda L.
pub fn regularized_min_variance(
    cov: &CovarianceEstimate,
    metric: &DiversificationMetric,
    lambda: f64,
) -> Result<PortfolioWeights> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = cov.n_assets();
    if metric.len() != n {
        return Err(Error::Dimension(format!(
            "metric of length {}, covariance is {n}x{n}",
            metric.len()
        )));
    }
    let mut c = cov.matrix().clone();
    for i in 0..n {
        c[(i, i)] += lambda * metric.diag()[i];
    }
    let chol = checked_cholesky(&c)?;
    let x = chol.solve(&DVector::from_element(n, 1.0));
    let s: f64 = x.sum();
    if s.abs() < 1e-300 {
        return Err(Error::Conditioning("degenerate normalization 1'C^-1 1 = 0".into()));
    }
    PortfolioWeights::new(x / s).map(|w| w.with_meta("lambda", lambda))
}

/// Per-asset sample variances of the panel (the backtest computes this on
/// the same causal window as the covariance).
pub fn asset_variance_metric(panel: &ReturnsPanel) -> Result<DiversificationMetric> {
    let t = panel.n_obs();
    if t < 2 {
        return Err(Error::InsufficientData { required: 2, actual: t });
    }
    let r = panel.returns();
    let mut diag = Vec::with_capacity(panel.n_assets());
    for j in 0..panel.n_assets() {
        let col = r.column(j);
        let mu = col.sum() / t as f64;
        let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (t as f64 - 1.0);
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!(
                "asset {} has zero sample variance",
                panel.asset_ids()[j]
            )));
        }
        diag.push(var);
    }
    DiversificationMetric::new(diag)
}

/// Inner solver used on each resampled data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InnerSolver {
    MinVariance,
    Ridge { lambda: f64 },
}

const RESAMPLE_JITTER: f64 = 1e-8;

fn jittered_min_variance(
    c: DMatrix<f64>,
    solver: InnerSolver,
    metric: Option<&DiversificationMetric>,
) -> Result<(PortfolioWeights, bool)> {
    let n = c.nrows();
    let est = CovarianceEstimate::new(c, crate::types::EstimatorTag::Sample)?;
    let solve = |e: &CovarianceEstimate| match solver {
        InnerSolver::MinVariance => min_variance_weights(e),
        InnerSolver::Ridge { lambda } => {
            regularized_min_variance(e, metric.expect("metric required for ridge"), lambda)
        }
    };
    match solve(&est) {
        Ok(w) => Ok((w, false)),
        Err(Error::Conditioning(_)) => {
            let mut c = est.matrix().clone();
            let jitter = RESAMPLE_JITTER * c.trace() / n as f64;
            for i in 0..n {
                c[(i, i)] += jitter;
            }
            let repaired = CovarianceEstimate::new(c, crate::types::EstimatorTag::Sample)?;
            Ok((solve(&repaired)?, true))
        }
        Err(e) => Err(e),
    }
}

/// Resampled weights: draw Gaussian panels from the sample moments, solve
/// the inner minimum-variance problem on each resample's sample covariance,
/// and average the weight vectors (fixed order, deterministic given seed).
pub fn resampled_weights(
    panel: &ReturnsPanel,
    n_resamples: usize,
    seed: u64,
    inner: InnerSolver,
) -> Result<PortfolioWeights> {
    let t = panel.n_obs();
    let n = panel.n_assets();
    if t < 2 {
        return Err(Error::InsufficientData { required: 2, actual: t });
    }
    if n_resamples < 1 {
        return Err(Error::Domain("n_resamples must be >= 1".into()));
    }
    let mean = column_means(panel.returns());
    let sample = sample_covariance(panel)?;
    let metric = match inner {
        InnerSolver::Ridge { .. } => Some(asset_variance_metric(panel)?),
        InnerSolver::MinVariance => None,
    };
    // factor the generator covariance, jittering if T <= N made it singular
    let mut gen_matrix = sample.matrix().clone();
    let chol = match gen_matrix.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = RESAMPLE_JITTER * gen_matrix.trace() / n as f64;
            for i in 0..n {
                gen_matrix[(i, i)] += jitter;
            }
            gen_matrix.clone().cholesky().ok_or_else(|| {
                Error::Conditioning("sample covariance not factorizable even after jitter".into())
            })?
        }
    };
    let l = chol.l();

    let runs: Vec<Result<(DVector<f64>, bool)>> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, k));
            let z = DMatrix::from_fn(t, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut draws = z * l.transpose();
            for row in 0..t {
                for j in 0..n {
                    draws[(row, j)] += mean[j];
                }
            }
            let (y, _) = crate::linalg::center_columns(&draws);
            let c = y.transpose() * &y / (t as f64 - 1.0);
            let (w, jittered) = jittered_min_variance(c, inner, metric.as_ref())?;
            Ok((w.weights().clone(), jittered))
        })
        .collect();

    let mut sum = DVector::zeros(n);
    let mut n_jittered = 0usize;
    for r in runs {
        let (w, jittered) = r?;
        sum += w;
        if jittered {
            n_jittered += 1;
        }
    }
    let avg = sum / n_resamples as f64;
    // averaging sum-to-one vectors preserves the constraint up to rounding;
    // renormalize the residual fp error away
    let total: f64 = avg.sum();
    PortfolioWeights::new(avg / total)
        .map(|w| w.with_meta("n_resamples", n_resamples as f64))
        .map(|w| w.with_meta("n_jittered", n_jittered as f64))
}
