//! Covariance estimators: sample covariance, shrinkage with selectable
//! targets, EM Factor Analysis and an exogenous-factor regression model.

mod fa;

pub use fa::{fa_fit_em, fa_loglik, fm_covariance, EmOptions, FaInit, FitTrace};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::center_columns;
use crate::types::{CovarianceEstimate, EstimatorTag, ReturnsPanel};

/// Unbiased sample covariance (1/(T-1) normalization, mean-centered).
pub fn sample_covariance(panel: &ReturnsPanel) -> Result<CovarianceEstimate> {
    let t = panel.n_obs();
    if t < 2 {
        return Err(Error::InsufficientData { required: 2, actual: t });
    }
    let (y, _) = center_columns(panel.returns());
    let c = y.transpose() * &y / (t as f64 - 1.0);
    CovarianceEstimate::new(c, EstimatorTag::Sample)
}

/// Shrinkage target selection for [`shrinkage_covariance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkageTarget {
    /// (average sample variance) * I
    IdentityScaled,
    /// diag of the sample covariance
    DiagonalVariances,
    /// average correlation applied to all off-diagonal pairs
    ConstantCorrelation,
    /// one-factor market model, see [`single_index_target`]
    SingleIndex,
}

/// Shrinkage intensity: fixed in [0, 1] or chosen by the plug-in rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Intensity {
    Fixed { lambda: f64 },
    Auto,
}

fn target_matrix(
    panel: &ReturnsPanel,
    sample: &DMatrix<f64>,
    target: ShrinkageTarget,
) -> Result<DMatrix<f64>> {
    let n = sample.nrows();
    Ok(match target {
        ShrinkageTarget::IdentityScaled => {
            let mu = sample.trace() / n as f64;
            DMatrix::from_diagonal_element(n, n, mu)
        }
        ShrinkageTarget::DiagonalVariances => DMatrix::from_diagonal(&sample.diagonal()),
        ShrinkageTarget::ConstantCorrelation => {
            let sd: Vec<f64> = (0..n).map(|i| sample[(i, i)].sqrt()).collect();
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for i in 0..n {
                for j in (i + 1)..n {
                    let denom = sd[i] * sd[j];
                    if denom > 0.0 {
                        sum += sample[(i, j)] / denom;
                        cnt += 1;
                    }
                }
            }
            let rbar = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    sample[(i, i)]
                } else {
                    rbar * sd[i] * sd[j]
                }
            })
        }
        ShrinkageTarget::SingleIndex => single_index_target(panel)?.matrix().clone(),
    })
}

/// Plug-in intensity: 1 - min(1, sum of entrywise sampling variances of the
/// sample covariance over the squared distance to the target).
fn auto_intensity(y: &DMatrix<f64>, sample: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let t = y.nrows() as f64;
    let n = y.ncols();
    let ratio = t / (t - 1.0);
    let mut sum_var = 0.0;
    for i in 0..n {
        for j in 0..n {
            // products w_t = y_ti * y_tj; Var(C_ij) ~ (T/(T-1))^2 * var(w)/T
            let mut mean_w = 0.0;
            for r in 0..y.nrows() {
                mean_w += y[(r, i)] * y[(r, j)];
            }
            mean_w /= t;
            let mut s2 = 0.0;
            for r in 0..y.nrows() {
                let d = y[(r, i)] * y[(r, j)] - mean_w;
                s2 += d * d;
            }
            s2 /= t - 1.0;
            sum_var += ratio * ratio * s2 / t;
        }
    }
    let mut dist = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = sample[(i, j)] - target[(i, j)];
            dist += d * d;
        }
    }
    if dist <= 0.0 {
        return 1.0;
    }
    (1.0 - (sum_var / dist).min(1.0)).clamp(0.0, 1.0)
}

/// Convex combination lambda * C_sample + (1 - lambda) * C_target.
pub fn shrinkage_covariance(
    panel: &ReturnsPanel,
    target: ShrinkageTarget,
    intensity: Intensity,
) -> Result<CovarianceEstimate> {
    let t = panel.n_obs();
    if t < 2 {
        return Err(Error::InsufficientData { required: 2, actual: t });
    }
    if target == ShrinkageTarget::SingleIndex && t < 3 {
        return Err(Error::InsufficientData { required: 3, actual: t });
    }
    let (y, _) = center_columns(panel.returns());
    let sample = y.transpose() * &y / (t as f64 - 1.0);
    let tgt = target_matrix(panel, &sample, target)?;
    let lambda = match intensity {
        Intensity::Fixed { lambda } => {
            if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
                return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
            }
            lambda
        }
        Intensity::Auto => auto_intensity(&y, &sample, &tgt),
    };
    let c = &sample * lambda + &tgt * (1.0 - lambda);
    Ok(CovarianceEstimate::new(c, EstimatorTag::Shrinkage)?.with_meta("lambda", lambda))
}

/// One-factor market-model target: equal-weighted market series, per-asset
/// betas by univariate least squares, residual variances on the diagonal.
pub fn single_index_target(panel: &ReturnsPanel) -> Result<CovarianceEstimate> {
    let t = panel.n_obs();
    let n = panel.n_assets();
    if t < 3 {
        return Err(Error::InsufficientData { required: 3, actual: t });
    }
    let r = panel.returns();
    let market = DVector::from_iterator(t, r.row_iter().map(|row| row.sum() / n as f64));
    let m_mean = market.sum() / t as f64;
    let m_centered = market.map(|x| x - m_mean);
    let var_m = m_centered.norm_squared() / (t as f64 - 1.0);
    let scale: f64 = r.iter().fold(0.0f64, |a, &x| a.max(x * x)).max(1e-300);
    if var_m <= 1e-24 * scale {
        return Err(Error::Degenerate("market series has zero variance".into()));
    }
    let (y, _) = center_columns(r);
    let mut beta = DVector::zeros(n);
    let mut resid = DVector::zeros(n);
    for i in 0..n {
        let cov_im = y.column(i).dot(&m_centered) / (t as f64 - 1.0);
        beta[i] = cov_im / var_m;
        let var_i = y.column(i).norm_squared() / (t as f64 - 1.0);
        resid[i] = (var_i - beta[i] * beta[i] * var_m).max(0.0);
    }
    let mut c = &beta * beta.transpose() * var_m;
    for i in 0..n {
        c[(i, i)] += resid[i];
    }
    CovarianceEstimate::new(c, EstimatorTag::Shrinkage)
}

/// Degrees of freedom (M + 1)(N - 1) + 2 of an M-factor model on N assets.
pub fn fa_dof(n_factors: usize, n_assets: usize) -> Result<usize> {
    if n_factors < 1 || n_factors >= n_assets {
        return Err(Error::Domain(format!(
            "need 1 <= M < N, got M={n_factors}, N={n_assets}"
        )));
    }
    Ok((n_factors + 1) * (n_assets - 1) + 2)
}

/// Covariance from a multivariate regression of returns on user-supplied
/// factor series: B' Cov(factors) B + diag(residual variances).
pub fn exogenous_factor_covariance(
    panel: &ReturnsPanel,
    factor_series: &DMatrix<f64>,
) -> Result<CovarianceEstimate> {
    let t = panel.n_obs();
    let f = factor_series.ncols();
    if factor_series.nrows() != t {
        return Err(Error::Dimension(format!(
            "factor series has {} rows, panel has {t}",
            factor_series.nrows()
        )));
    }
    if f >= t {
        return Err(Error::InsufficientData { required: f + 1, actual: t });
    }
    if factor_series.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite factor value".into()));
    }
    let (y, _) = center_columns(panel.returns());
    let (fc, _) = center_columns(factor_series);
    let gram = fc.transpose() * &fc;
    let scale = gram.trace().max(1e-300);
    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::Collinearity("factor gram matrix is singular".into())
    })?;
    for i in 0..f {
        if chol.l_dirty()[(i, i)].powi(2) <= 1e-12 * scale / f as f64 {
            return Err(Error::Collinearity(format!(
                "factor {i} is (numerically) collinear or constant"
            )));
        }
    }
    let exposures = chol.solve(&(fc.transpose() * &y)); // F x N
    let cov_f = &gram / (t as f64 - 1.0);
    let resid = &y - &fc * &exposures;
    let mut c = exposures.transpose() * &cov_f * &exposures;
    for i in 0..panel.n_assets() {
        c[(i, i)] += resid.column(i).norm_squared() / (t as f64 - 1.0);
    }
    CovarianceEstimate::new(c, EstimatorTag::ExogenousFactor)
}
