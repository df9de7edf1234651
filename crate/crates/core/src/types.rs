//! Shared domain types: return panels, factor-model parameters and
//! covariance estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Provenance tag attached to every covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Sample,
    Shrinkage,
    FactorAnalysis,
    DvaFactorAnalysis,
    ExogenousFactor,
    TrueModel,
}

impl EstimatorTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorTag::Sample => "sample",
            EstimatorTag::Shrinkage => "shrinkage",
            EstimatorTag::FactorAnalysis => "factor_analysis",
            EstimatorTag::DvaFactorAnalysis => "dva_factor_analysis",
            EstimatorTag::ExogenousFactor => "exogenous_factor",
            EstimatorTag::TrueModel => "true_model",
        }
    }
}

/// T x N panel of asset returns with identifiers and an ordered time index.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    returns: DMatrix<f64>,
    asset_ids: Vec<String>,
    time_index: Vec<String>,
}

impl ReturnsPanel {
    /// Build a panel, rejecting non-finite entries and non-increasing time labels.
    pub fn new(
        returns: DMatrix<f64>,
        asset_ids: Vec<String>,
        time_index: Vec<String>,
    ) -> Result<Self> {
        if asset_ids.len() != returns.ncols() {
            return Err(Error::Dimension(format!(
                "{} asset ids for {} columns",
                asset_ids.len(),
                returns.ncols()
            )));
        }
        if time_index.len() != returns.nrows() {
            return Err(Error::Dimension(format!(
                "{} time labels for {} rows",
                time_index.len(),
                returns.nrows()
            )));
        }
        if let Some((t, i)) = first_nonfinite(&returns) {
            return Err(Error::Data(format!(
                "non-finite return at row {t}, column {i}"
            )));
        }
        for w in time_index.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "time index not strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { returns, asset_ids, time_index })
    }

    /// Panel with synthetic identifiers `a0000..` and zero-padded time labels.
    pub fn from_matrix(returns: DMatrix<f64>) -> Result<Self> {
        let asset_ids = (0..returns.ncols()).map(|i| format!("a{i:04}")).collect();
        let time_index = (0..returns.nrows()).map(|t| format!("{t:08}")).collect();
        Self::new(returns, asset_ids, time_index)
    }

    pub fn n_obs(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn time_index(&self) -> &[String] {
        &self.time_index
    }

    /// Sub-panel restricted to rows `[row_start, row_end)` and the given columns.
    pub fn slice(&self, row_start: usize, row_end: usize, cols: &[usize]) -> Result<Self> {
        if row_end > self.n_obs() || row_start >= row_end {
            return Err(Error::Dimension(format!(
                "row range {row_start}..{row_end} out of {}",
                self.n_obs()
            )));
        }
        let t = row_end - row_start;
        let mut m = DMatrix::zeros(t, cols.len());
        for (jj, &j) in cols.iter().enumerate() {
            if j >= self.n_assets() {
                return Err(Error::Dimension(format!("column {j} out of range")));
            }
            for tt in 0..t {
                m[(tt, jj)] = self.returns[(row_start + tt, j)];
            }
        }
        let ids = cols.iter().map(|&j| self.asset_ids[j].clone()).collect();
        let times = self.time_index[row_start..row_end].to_vec();
        Self::new(m, ids, times)
    }
}

fn first_nonfinite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for t in 0..m.nrows() {
        for i in 0..m.ncols() {
            if !m[(t, i)].is_finite() {
                return Some((t, i));
            }
        }
    }
    None
}

/// Factor-model parameters: an M x N mixing matrix (row m = exposure vector
/// of factor m) and the diagonal of the idiosyncratic noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelParams {
    mixing: DMatrix<f64>,
    noise_var: DVector<f64>,
}

impl FactorModelParams {
    pub fn new(mixing: DMatrix<f64>, noise_var: DVector<f64>) -> Result<Self> {
        let (m, n) = (mixing.nrows(), mixing.ncols());
        if noise_var.len() != n {
            return Err(Error::Dimension(format!(
                "noise vector of length {} for {} assets",
                noise_var.len(),
                n
            )));
        }
        if m > n {
            return Err(Error::Dimension(format!("{m} factors for {n} assets")));
        }
        if noise_var.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Domain("noise variances must be strictly positive".into()));
        }
        if mixing.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite mixing entry".into()));
        }
        Ok(Self { mixing, noise_var })
    }

    pub fn n_factors(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.mixing.ncols()
    }

    /// M x N mixing matrix.
    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    /// Diagonal of the noise covariance.
    pub fn noise_var(&self) -> &DVector<f64> {
        &self.noise_var
    }

    /// Implied model covariance X'X + D.
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let mut c = self.mixing.transpose() * &self.mixing;
        for i in 0..self.n_assets() {
            c[(i, i)] += self.noise_var[i];
        }
        c
    }
}

/// Symmetric N x N covariance matrix with estimator provenance and optional
/// diagnostics (iterations, shrinkage intensity, clamp counts, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
    tag: EstimatorTag,
    meta: BTreeMap<String, f64>,
}

impl CovarianceEstimate {
    /// Wrap a matrix, enforcing symmetry within 1e-12 relative tolerance and
    /// storing the canonically symmetrized form.
    pub fn new(matrix: DMatrix<f64>, tag: EstimatorTag) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..matrix.nrows() {
            for j in (i + 1)..matrix.ncols() {
                worst = worst.max((matrix[(i, j)] - matrix[(j, i)]).abs());
            }
        }
        if worst > 1e-12 * scale {
            return Err(Error::Data(format!(
                "matrix asymmetry {worst:.3e} exceeds tolerance (scale {scale:.3e})"
            )));
        }
        let mut sym = matrix;
        for i in 0..sym.nrows() {
            for j in (i + 1)..sym.ncols() {
                let v = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        Ok(Self { matrix: sym, tag, meta: BTreeMap::new() })
    }

    pub fn with_meta(mut self, key: &str, value: f64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn n_assets(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn tag(&self) -> EstimatorTag {
        self.tag
    }

    pub fn meta(&self) -> &BTreeMap<String, f64> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, f64> {
        &mut self.meta
    }

    /// Smallest eigenvalue; used by tests to check positive semidefiniteness
    /// against the `-1e-10 * trace / N` tolerance.
    pub fn min_eigenvalue(&self) -> f64 {
        let eig = self.matrix.clone().symmetric_eigen();
        eig.eigenvalues.iter().fold(f64::INFINITY, |a, &x| a.min(x))
    }
}
