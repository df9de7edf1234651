//! Maximum-likelihood Factor Analysis fitted by Expectation-Maximization.
//!
//! The model is r_t = f_t X + eps_t with standard-normal factors and
//! diagonal Gaussian noise, so the implied covariance is X'X + D. The
//! E-step computes posterior factor moments given (X, D); the M-step
//! maximizes over (X, D) given those moments. All matrix work uses the
//! Woodbury form, so the per-iteration cost is O(M N^2).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_columns, sym_eigen_desc};
use crate::rng::rng_from_seed;
use crate::types::{CovarianceEstimate, EstimatorTag, FactorModelParams, ReturnsPanel};

/// Initialization strategy for the EM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FaInit {
    /// Deterministic start from the top-M eigenpairs of the sample covariance.
    Spectral,
    SeededRandom { seed: u64 },
}

/// Stopping and initialization options for [`fa_fit_em`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which iteration stops.
    pub rel_tol: f64,
    pub init: FaInit,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 1000, rel_tol: 1e-8, init: FaInit::Spectral }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::Domain("max_iter must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) || !self.rel_tol.is_finite() {
            return Err(Error::Domain("rel_tol must be > 0 and finite".into()));
        }
        Ok(())
    }
}

/// Per-iteration log-likelihoods and convergence status of an EM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub loglik_per_iter: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

struct FaState {
    /// N x M loadings (transpose of the mixing matrix).
    loadings: DMatrix<f64>,
    noise_var: DVector<f64>,
}

fn ml_covariance(panel: &ReturnsPanel) -> DMatrix<f64> {
    let (y, _) = center_columns(panel.returns());
    let t = panel.n_obs() as f64;
    y.transpose() * &y / t
}

/// Gaussian log-likelihood of T centered observations with second-moment
/// matrix `sm` under covariance W W' + diag(d), in Woodbury form.
fn marginal_loglik(w: &DMatrix<f64>, d: &DVector<f64>, sm: &DMatrix<f64>, t: f64) -> Result<f64> {
    let n = w.nrows();
    let m = w.ncols();
    // U = W' D^-1
    let mut u = w.transpose();
    for i in 0..n {
        let inv = 1.0 / d[i];
        for f in 0..m {
            u[(f, i)] *= inv;
        }
    }
    let a = DMatrix::identity(m, m) + &u * w;
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("posterior information matrix not PD".into()))?;
    let ln_det_a: f64 = (0..m).map(|i| chol.l_dirty()[(i, i)].ln() * 2.0).sum();
    let ln_det_c: f64 = d.iter().map(|x| x.ln()).sum::<f64>() + ln_det_a;
    let tr_dinv_sm: f64 = (0..n).map(|i| sm[(i, i)] / d[i]).sum();
    let g = chol.inverse();
    let k = &u * sm * u.transpose();
    let correction: f64 = g.iter().zip(k.iter()).map(|(a, b)| a * b).sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(-0.5 * t * (n as f64 * ln2pi + ln_det_c + tr_dinv_sm - correction))
}

fn em_step(state: &mut FaState, sm: &DMatrix<f64>, d_floor: f64) -> Result<()> {
    let n = state.loadings.nrows();
    let m = state.loadings.ncols();
    let mut u = state.loadings.transpose();
    for i in 0..n {
        let inv = 1.0 / state.noise_var[i];
        for f in 0..m {
            u[(f, i)] *= inv;
        }
    }
    let a = DMatrix::identity(m, m) + &u * &state.loadings;
    let g = a
        .cholesky()
        .ok_or_else(|| Error::Conditioning("posterior information matrix not PD".into()))?
        .inverse();
    let beta = &g * &u;
    let syf = sm * beta.transpose(); // N x M
    let sff = g + &beta * &syf; // M x M
    let chol = sff
        .cholesky()
        .ok_or_else(|| Error::Conditioning("factor second-moment matrix not PD".into()))?;
    let new_w = chol.solve(&syf.transpose()).transpose(); // N x M
    for i in 0..n {
        let explained: f64 = (0..m).map(|f| new_w[(i, f)] * syf[(i, f)]).sum();
        state.noise_var[i] = (sm[(i, i)] - explained).max(d_floor);
    }
    state.loadings = new_w;
    Ok(())
}

fn init_state(sm: &DMatrix<f64>, m: usize, init: FaInit, mean_var: f64) -> FaState {
    let n = sm.nrows();
    let floor = 1e-6 * mean_var;
    match init {
        FaInit::Spectral => {
            let (vals, vecs) = sym_eigen_desc(sm);
            let resid_mean = vals.iter().skip(m).sum::<f64>() / (n - m) as f64;
            let mut w = DMatrix::zeros(n, m);
            for j in 0..m {
                let scale = (vals[j] - resid_mean).max(floor).sqrt();
                for i in 0..n {
                    w[(i, j)] = vecs[(i, j)] * scale;
                }
            }
            let mut d = DVector::zeros(n);
            for i in 0..n {
                let explained: f64 = (0..m).map(|j| w[(i, j)] * w[(i, j)]).sum();
                d[i] = (sm[(i, i)] - explained).max(floor);
            }
            FaState { loadings: w, noise_var: d }
        }
        FaInit::SeededRandom { seed } => {
            let mut rng = rng_from_seed(seed);
            let sd = (mean_var / m as f64).sqrt();
            let w = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal) * sd);
            let d = DVector::from_fn(n, |i, _| sm[(i, i)].max(floor));
            FaState { loadings: w, noise_var: d }
        }
    }
}

/// Fit an M-factor model to the centered panel by EM.
pub fn fa_fit_em(
    panel: &ReturnsPanel,
    n_factors: usize,
    opts: &EmOptions,
) -> Result<(FactorModelParams, FitTrace)> {
    opts.validate()?;
    let n = panel.n_assets();
    let t = panel.n_obs();
    if n_factors < 1 || n_factors >= n {
        return Err(Error::Dimension(format!(
            "n_factors must satisfy 1 <= M < N, got M={n_factors}, N={n}"
        )));
    }
    if t < 2 {
        return Err(Error::InsufficientData { required: 2, actual: t });
    }
    if t <= n_factors + 1 {
        return Err(Error::InsufficientData { required: n_factors + 2, actual: t });
    }
    let sm = ml_covariance(panel);
    let mean_var = sm.trace() / n as f64;
    if !(mean_var > 0.0) {
        return Err(Error::Degenerate("panel has zero total variance".into()));
    }
    let d_floor = 1e-8 * mean_var;
    let mut state = init_state(&sm, n_factors, opts.init, mean_var);

    let mut trace = FitTrace { loglik_per_iter: Vec::new(), converged: false, iterations: 0 };
    let mut prev = f64::NEG_INFINITY;
    for it in 0..opts.max_iter {
        em_step(&mut state, &sm, d_floor)?;
        let ll = marginal_loglik(&state.loadings, &state.noise_var, &sm, t as f64)?;
        trace.loglik_per_iter.push(ll);
        trace.iterations = it + 1;
        if it > 0 {
            let rel = (ll - prev) / prev.abs().max(1e-12);
            if rel < opts.rel_tol {
                trace.converged = true;
                break;
            }
        }
        prev = ll;
    }
    let params = FactorModelParams::new(state.loadings.transpose(), state.noise_var)?;
    Ok((params, trace))
}

/// Gaussian log-likelihood of the centered panel under the covariance
/// implied by the parameters.
pub fn fa_loglik(params: &FactorModelParams, panel: &ReturnsPanel) -> Result<f64> {
    if params.n_assets() != panel.n_assets() {
        return Err(Error::Dimension(format!(
            "model for {} assets, panel has {}",
            params.n_assets(),
            panel.n_assets()
        )));
    }
    let sm = ml_covariance(panel);
    marginal_loglik(
        &params.mixing().transpose(),
        &params.noise_var().clone(),
        &sm,
        panel.n_obs() as f64,
    )
}

/// Covariance X'X + D implied by a fitted factor model.
pub fn fm_covariance(params: &FactorModelParams) -> CovarianceEstimate {
    CovarianceEstimate::new(params.covariance_matrix(), EstimatorTag::FactorAnalysis)
        .expect("model covariance is symmetric by construction")
}
