//! Synthetic return panels from known factor models, plus Marchenko-Pastur
//! reference quantities for spectrum studies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::types::{CovarianceEstimate, EstimatorTag, FactorModelParams, ReturnsPanel};

/// Idiosyncratic noise law for generated panels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseDistribution {
    Gaussian,
    /// Student-t noise parameterized by the kurtosis k_g of the target law;
    /// degrees of freedom follow nu = 6/k_g + 4.
    StudentT { kurtosis: f64 },
}

/// Noise variances given either explicitly or as a range filled with
/// equally spaced values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    #[serde(rename = "noise_variances")]
    Explicit(Vec<f64>),
    #[serde(rename = "noise_range")]
    Range([f64; 2]),
}

/// Specification of a synthetic factor-model generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_assets: usize,
    pub n_obs: usize,
    pub factor_strengths: Vec<f64>,
    #[serde(flatten)]
    pub noise: NoiseSpec,
    pub noise_distribution: NoiseDistribution,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_assets < 1 {
            return Err(Error::Domain("n_assets must be >= 1".into()));
        }
        if self.n_obs < 1 {
            return Err(Error::Domain("n_obs must be >= 1".into()));
        }
        if self.factor_strengths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain("every factor strength must be > 0 and finite".into()));
        }
        match &self.noise {
            NoiseSpec::Explicit(v) => {
                if v.len() != self.n_assets {
                    return Err(Error::Dimension(format!(
                        "noise_variances has length {}, expected {}",
                        v.len(),
                        self.n_assets
                    )));
                }
                if v.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
                    return Err(Error::Domain("noise variances must be > 0 and finite".into()));
                }
            }
            NoiseSpec::Range([lo, hi]) => {
                if !(lo > &0.0) || !(hi > &0.0) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Domain("noise_range bounds must be > 0 and finite".into()));
                }
            }
        }
        if let NoiseDistribution::StudentT { kurtosis } = self.noise_distribution {
            if !(kurtosis > 0.0) || !kurtosis.is_finite() {
                return Err(Error::Domain(
                    "student_t kurtosis must be > 0 and finite (so that nu > 4)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Resolved length-N noise variance vector (equally spaced when a range
    /// is given; a single asset takes the lower bound).
    pub fn noise_variances(&self) -> Result<DVector<f64>> {
        self.validate()?;
        let n = self.n_assets;
        Ok(match &self.noise {
            NoiseSpec::Explicit(v) => DVector::from_vec(v.clone()),
            NoiseSpec::Range([lo, hi]) => {
                if n == 1 {
                    DVector::from_element(1, *lo)
                } else {
                    let step = (hi - lo) / (n as f64 - 1.0);
                    DVector::from_iterator(n, (0..n).map(|i| lo + step * i as f64))
                }
            }
        })
    }
}

/// Draw the mixing matrix for a spec: each row is an isotropically random
/// unit vector scaled to the requested strength. Deterministic given the seed.
pub fn make_generator_params(spec: &GeneratorSpec) -> Result<FactorModelParams> {
    spec.validate()?;
    let n = spec.n_assets;
    let m = spec.factor_strengths.len();
    if m > n {
        return Err(Error::Dimension(format!("{m} factors exceed {n} assets")));
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut mixing = DMatrix::zeros(m, n);
    for (row, &strength) in spec.factor_strengths.iter().enumerate() {
        let mut v = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mut norm = v.norm();
        while norm == 0.0 {
            v = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            norm = v.norm();
        }
        for j in 0..n {
            mixing[(row, j)] = v[j] / norm * strength;
        }
    }
    FactorModelParams::new(mixing, spec.noise_variances()?)
}

/// Population covariance X'X + D of a factor model.
pub fn true_covariance(params: &FactorModelParams) -> CovarianceEstimate {
    CovarianceEstimate::new(params.covariance_matrix(), EstimatorTag::TrueModel)
        .expect("model covariance is symmetric by construction")
}

/// Degrees of freedom nu = 6/k + 4 for a Student-t with kurtosis k.
pub fn student_t_dof(kurtosis: f64) -> Result<f64> {
    if !(kurtosis > 0.0) || !kurtosis.is_finite() {
        return Err(Error::Domain(format!("kurtosis must be > 0 and finite, got {kurtosis}")));
    }
    Ok(6.0 / kurtosis + 4.0)
}

/// Excess kurtosis 6/(nu - 4) of a Student-t with nu > 4 degrees of freedom;
/// inverse of [`student_t_dof`].
pub fn excess_kurtosis_of_dof(dof: f64) -> Result<f64> {
    if !(dof > 4.0) || !dof.is_finite() {
        return Err(Error::Domain(format!("kurtosis is finite only for dof > 4, got {dof}")));
    }
    Ok(6.0 / (dof - 4.0))
}

/// Matrix of i.i.d. Student-t draws rescaled to the requested variance
/// (raw t variance nu/(nu-2) is divided out).
pub fn sample_scaled_t(
    dof: f64,
    variance: f64,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if !(dof > 2.0) || !dof.is_finite() {
        return Err(Error::Domain(format!("t variance exists only for dof > 2, got {dof}")));
    }
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!("variance must be > 0, got {variance}")));
    }
    let dist = StudentT::new(dof).map_err(|e| Error::Domain(e.to_string()))?;
    let scale = (variance / (dof / (dof - 2.0))).sqrt();
    let mut rng = rng_from_seed(seed);
    let mut m = DMatrix::zeros(rows, cols);
    for t in 0..rows {
        for j in 0..cols {
            m[(t, j)] = dist.sample(&mut rng) * scale;
        }
    }
    Ok(m)
}

/// Simulate a T x N panel r_t = f_t X + eps_t with standard-normal factors
/// and noise of the requested law scaled to the model variances.
pub fn generate_panel(
    params: &FactorModelParams,
    n_obs: usize,
    dist: NoiseDistribution,
    seed: u64,
) -> Result<ReturnsPanel> {
    if n_obs < 1 {
        return Err(Error::Domain("n_obs must be >= 1".into()));
    }
    let n = params.n_assets();
    let m = params.n_factors();
    let mut rng = rng_from_seed(seed);

    let mut factors = DMatrix::zeros(n_obs, m);
    for t in 0..n_obs {
        for f in 0..m {
            factors[(t, f)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut returns = factors * params.mixing();

    match dist {
        NoiseDistribution::Gaussian => {
            let sd: Vec<f64> = params.noise_var().iter().map(|d| d.sqrt()).collect();
            for t in 0..n_obs {
                for j in 0..n {
                    returns[(t, j)] += rng.sample::<f64, _>(StandardNormal) * sd[j];
                }
            }
        }
        NoiseDistribution::StudentT { kurtosis } => {
            let dof = student_t_dof(kurtosis)?;
            let t_dist = StudentT::new(dof).map_err(|e| Error::Domain(e.to_string()))?;
            let raw_sd = (dof / (dof - 2.0)).sqrt();
            let sd: Vec<f64> = params.noise_var().iter().map(|d| d.sqrt() / raw_sd).collect();
            for t in 0..n_obs {
                for j in 0..n {
                    returns[(t, j)] += t_dist.sample(&mut rng) * sd[j];
                }
            }
        }
    }
    ReturnsPanel::from_matrix(returns)
}

/// Marchenko-Pastur support edges for unit-variance i.i.d. data at
/// aspect ratio q = T/N, plus the point mass at zero when q < 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpSupport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Fraction of eigenvalues exactly at zero in the limit (max(0, 1 - q)).
    pub zero_mass: f64,
}

/// Panel of i.i.d. standard-normal returns without factor structure, for
/// eigenvalue spectrum studies.
pub fn standard_normal_panel(n_obs: usize, n_assets: usize, seed: u64) -> Result<ReturnsPanel> {
    if n_obs < 1 || n_assets < 1 {
        return Err(Error::Domain(format!(
            "panel dimensions must be >= 1, got {n_obs}x{n_assets}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let m = DMatrix::from_fn(n_obs, n_assets, |_, _| rng.sample::<f64, _>(StandardNormal));
    ReturnsPanel::from_matrix(m)
}

pub fn marchenko_pastur_support(q: f64) -> Result<MpSupport> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Domain(format!("aspect ratio q must be > 0, got {q}")));
    }
    let s = (1.0 / q).sqrt();
    Ok(MpSupport {
        lambda_min: (1.0 - s) * (1.0 - s),
        lambda_max: (1.0 + s) * (1.0 + s),
        zero_mass: (1.0 - q).max(0.0),
    })
}
