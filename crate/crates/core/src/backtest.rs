//! Rolling-window out-of-sample evaluation: estimate covariance on a
//! strictly causal window, form minimum-variance portfolios on random asset
//! subsets, and accumulate realized variance and mean absolute deviation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::dva::dva_covariance;
use crate::error::{Error, Result};
use crate::estimators::{
    exogenous_factor_covariance, fa_fit_em, fm_covariance, sample_covariance,
    shrinkage_covariance, EmOptions, Intensity, ShrinkageTarget,
};
use crate::linalg::column_means;
use crate::portfolio::{
    asset_variance_metric, min_variance_weights, regularized_min_variance, resampled_weights,
    InnerSolver,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::types::{CovarianceEstimate, EstimatorTag, ReturnsPanel};

/// Fraction of (period, subset) cells that may be skipped before the run
/// is considered invalid.
pub const SKIP_LIMIT_PCT: f64 = 1.0;

/// Which covariance estimator (or weight scheme) the backtest evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorSpec {
    Sample,
    Shrinkage {
        target: ShrinkageTarget,
        intensity: Intensity,
    },
    Fa {
        n_factors: usize,
        #[serde(default)]
        em: EmOptions,
    },
    DvaFa {
        n_factors: usize,
        k_runs: usize,
        #[serde(default)]
        em: EmOptions,
    },
    /// Regression on an exogenous factor series loaded from a returns-style
    /// CSV aligned row-for-row with the evaluated panel.
    Exogenous { factors_csv: String },
    /// Average of minimum-variance weights over Gaussian resamples.
    Resampled { n_resamples: usize },
    /// A fixed N x N covariance loaded from a matrix CSV, e.g. the true
    /// generator covariance of a synthetic market.
    FixedCovariance { matrix_csv: String },
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::Sample => EstimatorTag::Sample.as_str(),
            EstimatorSpec::Shrinkage { .. } => EstimatorTag::Shrinkage.as_str(),
            EstimatorSpec::Fa { .. } => EstimatorTag::FactorAnalysis.as_str(),
            EstimatorSpec::DvaFa { .. } => EstimatorTag::DvaFactorAnalysis.as_str(),
            EstimatorSpec::Exogenous { .. } => EstimatorTag::ExogenousFactor.as_str(),
            EstimatorSpec::Resampled { .. } => "resampled",
            EstimatorSpec::FixedCovariance { .. } => EstimatorTag::TrueModel.as_str(),
        }
    }
}

/// Ridge penalty applied at the portfolio-solve step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Regularization {
    None,
    Ridge { lambda: f64 },
    RidgePath { lambdas: Vec<f64> },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::None
    }
}

fn default_window() -> usize {
    150
}

fn default_n_subsets() -> usize {
    1000
}

fn default_rebalance() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    pub subset_size: usize,
    #[serde(default = "default_n_subsets")]
    pub n_subsets: usize,
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub regularization: Regularization,
    /// Recompute weights every this many out-of-sample periods; the trailing
    /// mean is still refreshed daily. 1 = rebalance daily.
    #[serde(default = "default_rebalance")]
    pub rebalance_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BacktestConfig {
    pub fn validate(&self, n_assets: usize) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Domain(format!("window must be >= 2, got {}", self.window)));
        }
        if self.subset_size < 1 || self.subset_size > n_assets {
            return Err(Error::Domain(format!(
                "subset_size must be in 1..={n_assets}, got {}",
                self.subset_size
            )));
        }
        if self.n_subsets < 1 {
            return Err(Error::Domain("n_subsets must be >= 1".into()));
        }
        if self.rebalance_every < 1 {
            return Err(Error::Domain("rebalance_every must be >= 1".into()));
        }
        match &self.regularization {
            Regularization::Ridge { lambda } => {
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return Err(Error::Domain(format!("ridge lambda must be >= 0, got {lambda}")));
                }
            }
            Regularization::RidgePath { lambdas } => {
                if lambdas.is_empty() {
                    return Err(Error::Domain("ridge path must contain at least one lambda".into()));
                }
                if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    return Err(Error::Domain("ridge path lambdas must all be >= 0".into()));
                }
            }
            Regularization::None => {}
        }
        Ok(())
    }
}

/// One out-of-sample period: subset-averaged squared and absolute
/// deviations of the portfolio returns from the trailing mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub time: String,
    pub sq_dev: f64,
    pub abs_dev: f64,
}

/// Summary for one ridge-penalty value in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub variance: f64,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub estimator: String,
    /// Time-mean of subset-averaged squared deviations.
    pub realized_variance: f64,
    /// Time-mean of subset-averaged absolute deviations.
    pub realized_mad: f64,
    pub per_period: Vec<PeriodRecord>,
    /// Populated by [`run_lambda_sweep`]; the headline numbers and
    /// `per_period` then refer to the first lambda in the path.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_lambda: Option<Vec<LambdaPoint>>,
    pub meta: BTreeMap<String, f64>,
}

/// Draw J index sets of size n from 0..n_total, each uniformly without
/// replacement, independently across sets; deterministic given seed.
pub fn subset_sample(n_total: usize, n: usize, j: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < 1 || n > n_total {
        return Err(Error::Domain(format!("subset size must be in 1..={n_total}, got {n}")));
    }
    if j < 1 {
        return Err(Error::Domain("need at least one subset".into()));
    }
    Ok((0..j as u64)
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, k));
            let mut idx = rand::seq::index::sample(&mut rng, n_total, n).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// Estimator with file-backed inputs resolved into memory.
enum ResolvedEstimator {
    Sample,
    Shrinkage { target: ShrinkageTarget, intensity: Intensity },
    Fa { n_factors: usize, em: EmOptions },
    DvaFa { n_factors: usize, k_runs: usize, em: EmOptions },
    Exogenous { factors: DMatrix<f64> },
    Resampled { n_resamples: usize },
    Fixed { cov: DMatrix<f64> },
}

fn resolve_estimator(spec: &EstimatorSpec, panel: &ReturnsPanel) -> Result<ResolvedEstimator> {
    Ok(match spec {
        EstimatorSpec::Sample => ResolvedEstimator::Sample,
        EstimatorSpec::Shrinkage { target, intensity } => ResolvedEstimator::Shrinkage {
            target: target.clone(),
            intensity: *intensity,
        },
        EstimatorSpec::Fa { n_factors, em } => ResolvedEstimator::Fa {
            n_factors: *n_factors,
            em: em.clone(),
        },
        EstimatorSpec::DvaFa { n_factors, k_runs, em } => ResolvedEstimator::DvaFa {
            n_factors: *n_factors,
            k_runs: *k_runs,
            em: em.clone(),
        },
        EstimatorSpec::Exogenous { factors_csv } => {
            let fp = load_returns_csv(Path::new(factors_csv))?;
            if fp.n_obs() != panel.n_obs() {
                return Err(Error::Dimension(format!(
                    "factor series has {} rows, panel has {}",
                    fp.n_obs(),
                    panel.n_obs()
                )));
            }
            ResolvedEstimator::Exogenous { factors: fp.returns().clone() }
        }
        EstimatorSpec::Resampled { n_resamples } => {
            if *n_resamples < 1 {
                return Err(Error::Domain("n_resamples must be >= 1".into()));
            }
            ResolvedEstimator::Resampled { n_resamples: *n_resamples }
        }
        EstimatorSpec::FixedCovariance { matrix_csv } => {
            let cov = load_matrix_csv(Path::new(matrix_csv))?;
            if cov.nrows() != panel.n_assets() || cov.ncols() != panel.n_assets() {
                return Err(Error::Dimension(format!(
                    "fixed covariance is {}x{}, panel has {} assets",
                    cov.nrows(),
                    cov.ncols(),
                    panel.n_assets()
                )));
            }
            ResolvedEstimator::Fixed { cov }
        }
    })
}

fn estimate_window_covariance(
    est: &ResolvedEstimator,
    window_panel: &ReturnsPanel,
    subset: &[usize],
    row_start: usize,
    row_end: usize,
    full_panel_rows: usize,
    pair_seed: u64,
) -> Result<CovarianceEstimate> {
    debug_assert_eq!(row_end - row_start, window_panel.n_obs());
    let _ = full_panel_rows;
    match est {
        ResolvedEstimator::Sample => sample_covariance(window_panel),
        ResolvedEstimator::Shrinkage { target, intensity } => {
            shrinkage_covariance(window_panel, target.clone(), *intensity)
        }
        ResolvedEstimator::Fa { n_factors, em } => {
            let (fit, _) = fa_fit_em(window_panel, *n_factors, em)?;
            Ok(fm_covariance(&fit))
        }
        ResolvedEstimator::DvaFa { n_factors, k_runs, em } => {
            dva_covariance(window_panel, *n_factors, *k_runs, em, pair_seed)
        }
        ResolvedEstimator::Exogenous { factors } => {
            let f = factors.rows(row_start, row_end - row_start).into_owned();
            exogenous_factor_covariance(window_panel, &f)
        }
        ResolvedEstimator::Fixed { cov } => {
            let n = subset.len();
            let sub = DMatrix::from_fn(n, n, |i, j| cov[(subset[i], subset[j])]);
            CovarianceEstimate::new(sub, EstimatorTag::TrueModel)
        }
        ResolvedEstimator::Resampled { .. } => {
            unreachable!("resampled scheme solves weights directly")
        }
    }
}

/// Weights per lambda at one rebalance point; None marks a skipped solve.
fn solve_rebalance(
    est: &ResolvedEstimator,
    window_panel: &ReturnsPanel,
    subset: &[usize],
    row_start: usize,
    row_end: usize,
    full_rows: usize,
    lambdas: &[Option<f64>],
    pair_seed: u64,
) -> Vec<Option<DVector<f64>>> {
    if let ResolvedEstimator::Resampled { n_resamples } = est {
        return lambdas
            .iter()
            .map(|l| {
                let inner = match l {
                    None => InnerSolver::MinVariance,
                    Some(l) => InnerSolver::Ridge { lambda: *l },
                };
                resampled_weights(window_panel, *n_resamples, pair_seed, inner)
                    .ok()
                    .map(|w| w.weights().clone())
            })
            .collect();
    }
    let cov = match estimate_window_covariance(
        est,
        window_panel,
        subset,
        row_start,
        row_end,
        full_rows,
        pair_seed,
    ) {
        Ok(c) => c,
        Err(_) => return vec![None; lambdas.len()],
    };
    let metric = if lambdas.iter().any(|l| l.is_some()) {
        match asset_variance_metric(window_panel) {
            Ok(m) => Some(m),
            Err(_) => return vec![None; lambdas.len()],
        }
    } else {
        None
    };
    lambdas
        .iter()
        .map(|l| {
            let solved = match l {
                None => min_variance_weights(&cov),
                Some(l) => regularized_min_variance(
                    &cov,
                    metric.as_ref().expect("metric computed when a lambda is set"),
                    *l,
                ),
            };
            solved.ok().map(|w| w.weights().clone())
        })
        .collect()
}

/// Per-(subset, period, lambda) outcome; None = skipped.
type SubsetOutcomes = Vec<Vec<Option<(f64, f64)>>>;

fn run_engine(
    panel: &ReturnsPanel,
    config: &BacktestConfig,
    lambdas: &[Option<f64>],
) -> Result<(Vec<Vec<PeriodRecord>>, BTreeMap<String, f64>)> {
    let t_total = panel.n_obs();
    let n = panel.n_assets();
    config.validate(n)?;
    if t_total < config.window + 2 {
        return Err(Error::InsufficientData { required: config.window + 2, actual: t_total });
    }
    let est = resolve_estimator(&config.estimator, panel)?;
    let subsets = subset_sample(
        n,
        config.subset_size,
        config.n_subsets,
        derive_seed(config.seed, 0x5e7),
    )?;
    let window = config.window;
    let n_periods = t_total - window;

    let per_subset: Vec<SubsetOutcomes> = subsets
        .par_iter()
        .enumerate()
        .map(|(j, subset)| {
            let subset_seed = derive_seed(config.seed, 0xba5e ^ (j as u64));
            let mut weights: Vec<Option<DVector<f64>>> = vec![None; lambdas.len()];
            let mut out: SubsetOutcomes =
                vec![vec![None; n_periods]; lambdas.len()];
            for p in 0..n_periods {
                let t = window + p; // index of the out-of-sample day
                let window_panel = match panel.slice(t - window, t, subset) {
                    Ok(w) => w,
                    Err(_) => continue,
                };
                if p % config.rebalance_every == 0 {
                    weights = solve_rebalance(
                        &est,
                        &window_panel,
                        subset,
                        t - window,
                        t,
                        t_total,
                        lambdas,
                        derive_seed(subset_seed, p as u64),
                    );
                }
                let r_hat = column_means(window_panel.returns());
                let r_t = DVector::from_iterator(
                    subset.len(),
                    subset.iter().map(|&a| panel.returns()[(t, a)]),
                );
                let dev_vec = r_t - r_hat;
                for (li, w) in weights.iter().enumerate() {
                    if let Some(w) = w {
                        let d = w.dot(&dev_vec);
                        out[li][p] = Some((d * d, d.abs()));
                    }
                }
            }
            out
        })
        .collect();

    // aggregate across subsets in fixed order
    let mut per_lambda_periods: Vec<Vec<PeriodRecord>> = Vec::with_capacity(lambdas.len());
    let mut max_skipped = 0usize;
    for li in 0..lambdas.len() {
        let mut skipped = 0usize;
        let mut records = Vec::with_capacity(n_periods);
        for p in 0..n_periods {
            let mut sq = 0.0;
            let mut ab = 0.0;
            let mut count = 0usize;
            for outcomes in &per_subset {
                match outcomes[li][p] {
                    Some((s, a)) => {
                        sq += s;
                        ab += a;
                        count += 1;
                    }
                    None => skipped += 1,
                }
            }
            if count > 0 {
                records.push(PeriodRecord {
                    time: panel.time_index()[window + p].clone(),
                    sq_dev: sq / count as f64,
                    abs_dev: ab / count as f64,
                });
            }
        }
        let total = n_periods * config.n_subsets;
        if (skipped as f64) > total as f64 * SKIP_LIMIT_PCT / 100.0 {
            return Err(Error::TooManySkips { skipped, total, limit_pct: SKIP_LIMIT_PCT });
        }
        max_skipped = max_skipped.max(skipped);
        per_lambda_periods.push(records);
    }

    let mut meta = BTreeMap::new();
    meta.insert("n_periods".into(), n_periods as f64);
    meta.insert("n_subsets".into(), config.n_subsets as f64);
    meta.insert("n_skipped".into(), max_skipped as f64);
    Ok((per_lambda_periods, meta))
}

fn summarize(records: &[PeriodRecord]) -> (f64, f64) {
    let n = records.len() as f64;
    let var = records.iter().map(|r| r.sq_dev).sum::<f64>() / n;
    let mad = records.iter().map(|r| r.abs_dev).sum::<f64>() / n;
    (var, mad)
}

/// Rolling-window backtest of a single estimator configuration.
pub fn run_backtest(panel: &ReturnsPanel, config: &BacktestConfig) -> Result<BacktestReport> {
    let lambdas: Vec<Option<f64>> = match &config.regularization {
        Regularization::None => vec![None],
        Regularization::Ridge { lambda } => vec![Some(*lambda)],
        Regularization::RidgePath { .. } => {
            return Err(Error::Domain(
                "ridge_path configs run through run_lambda_sweep".into(),
            ));
        }
    };
    let (mut per_lambda_periods, meta) = run_engine(panel, config, &lambdas)?;
    let per_period = per_lambda_periods.remove(0);
    let (variance, mad) = summarize(&per_period);
    Ok(BacktestReport {
        estimator: config.estimator.name().to_string(),
        realized_variance: variance,
        realized_mad: mad,
        per_period,
        per_lambda: None,
        meta,
    })
}

/// One backtest per ridge lambda, sharing the per-(period, subset)
/// covariance estimate; only the solve step varies across the path.
pub fn run_lambda_sweep(panel: &ReturnsPanel, config: &BacktestConfig) -> Result<BacktestReport> {
    let path = match &config.regularization {
        Regularization::RidgePath { lambdas } => lambdas.clone(),
        _ => {
            return Err(Error::Domain(
                "run_lambda_sweep requires a ridge_path regularization".into(),
            ));
        }
    };
    let lambdas: Vec<Option<f64>> = path.iter().map(|l| Some(*l)).collect();
    let (per_lambda_periods, meta) = run_engine(panel, config, &lambdas)?;
    let points: Vec<LambdaPoint> = path
        .iter()
        .zip(&per_lambda_periods)
        .map(|(l, recs)| {
            let (variance, mad) = summarize(recs);
            LambdaPoint { lambda: *l, variance, mad }
        })
        .collect();
    let per_period = per_lambda_periods.into_iter().next().expect("path non-empty");
    Ok(BacktestReport {
        estimator: config.estimator.name().to_string(),
        realized_variance: points[0].variance,
        realized_mad: points[0].mad,
        per_period,
        per_lambda: Some(points),
        meta,
    })
}

/// Two-sided paired randomization (sign-flip) test on the mean difference
/// of two per-period loss series. Exhausts all 2^n sign patterns when that
/// is no more work than n_perm random flips; otherwise Monte-Carlo with +1
/// smoothing.
pub fn significance_randomization(
    per_period_a: &[f64],
    per_period_b: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<f64> {
    let n = per_period_a.len();
    if n != per_period_b.len() {
        return Err(Error::Dimension(format!(
            "paired series of unequal length: {n} vs {}",
            per_period_b.len()
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientData { required: 1, actual: 0 });
    }
    if n_perm < 1 {
        return Err(Error::Domain("n_perm must be >= 1".into()));
    }
    let d: Vec<f64> = per_period_a.iter().zip(per_period_b).map(|(a, b)| a - b).collect();
    let obs = d.iter().sum::<f64>().abs() / n as f64;
    // tolerance for fp noise when a flipped mean ties the observed one
    let scale: f64 = d.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
    let thresh = obs - 1e-12 * scale.max(f64::MIN_POSITIVE);

    if n < 64 && (1u128 << n) <= n_perm as u128 {
        let total = 1u64 << n;
        let mut count = 0u64;
        for mask in 0..total {
            let mut s = 0.0;
            for (i, &x) in d.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    s -= x;
                } else {
                    s += x;
                }
            }
            if (s / n as f64).abs() >= thresh {
                count += 1;
            }
        }
        Ok(count as f64 / total as f64)
    } else {
        let mut rng = rng_from_seed(seed);
        let mut count = 0usize;
        for _ in 0..n_perm {
            let mut s = 0.0;
            for &x in &d {
                if rand::Rng::gen::<bool>(&mut rng) {
                    s -= x;
                } else {
                    s += x;
                }
            }
            if (s / n as f64).abs() >= thresh {
                count += 1;
            }
        }
        Ok((1 + count) as f64 / (n_perm + 1) as f64)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Load a returns panel from CSV with header `date,<ids>...`.
pub fn load_returns_csv(path: &Path) -> Result<ReturnsPanel> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv(format!("{}: bad header: {e}", path.display())))?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("date") {
        return Err(Error::Csv(format!(
            "{}: header must be `date,<ids>...`",
            path.display()
        )));
    }
    let asset_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = asset_ids.len();
    let mut dates = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Csv(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != n + 1 {
            return Err(Error::Csv(format!(
                "{}: row {row}: expected {} fields, got {}",
                path.display(),
                n + 1,
                record.len()
            )));
        }
        dates.push(record[0].to_string());
        for cell in record.iter().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Csv(format!("{}: row {row}: non-numeric cell `{cell}`", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::Csv(format!(
                    "{}: row {row}: non-finite cell `{cell}`",
                    path.display()
                )));
            }
            values.push(v);
        }
    }
    if dates.is_empty() {
        return Err(Error::Csv(format!("{}: no data rows", path.display())));
    }
    let matrix = DMatrix::from_row_slice(dates.len(), n, &values);
    ReturnsPanel::new(matrix, asset_ids, dates)
}

/// Write a returns panel as CSV with header `date,<ids>...`; values are
/// formatted shortest-round-trip so a reload is bitwise faithful.
pub fn write_returns_csv(panel: &ReturnsPanel, path: &Path) -> Result<()> {
    let mut buf = String::new();
    buf.push_str("date");
    for id in panel.asset_ids() {
        buf.push(',');
        buf.push_str(id);
    }
    buf.push('\n');
    let r = panel.returns();
    for t in 0..panel.n_obs() {
        buf.push_str(&panel.time_index()[t]);
        for j in 0..panel.n_assets() {
            buf.push(',');
            buf.push_str(&format!("{}", r[(t, j)]));
        }
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

/// Load a headerless numeric matrix CSV.
pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut values: Vec<f64> = Vec::new();
    let mut ncols = 0usize;
    let mut nrows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv(format!("{}: row {row}: {e}", path.display())))?;
        if nrows == 0 {
            ncols = record.len();
        } else if record.len() != ncols {
            return Err(Error::Csv(format!(
                "{}: row {row}: expected {ncols} fields, got {}",
                path.display(),
                record.len()
            )));
        }
        for cell in record.iter() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Csv(format!("{}: row {row}: non-numeric cell `{cell}`", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::Csv(format!(
                    "{}: row {row}: non-finite cell `{cell}`",
                    path.display()
                )));
            }
            values.push(v);
        }
        nrows += 1;
    }
    if nrows == 0 {
        return Err(Error::Csv(format!("{}: empty matrix file", path.display())));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &values))
}

/// Write a headerless numeric matrix CSV, shortest-round-trip formatted.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut buf = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                buf.push(',');
            }
            buf.push_str(&format!("{}", m[(i, j)]));
        }
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

/// Write bytes to a temp file in the destination directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// One line of the estimator-comparison summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    /// realized MAD scaled by 10^3
    pub mad_e3: f64,
    /// realized variance scaled by 10^6
    pub variance_e6: f64,
    pub p_vs_reference: Option<f64>,
}

impl SummaryRow {
    pub fn from_report(report: &BacktestReport, p_vs_reference: Option<f64>) -> Self {
        Self {
            estimator: report.estimator.clone(),
            mad_e3: report.realized_mad * 1e3,
            variance_e6: report.realized_variance * 1e6,
            p_vs_reference,
        }
    }
}

/// Write the comparison summary: one row per estimator, scaled as in the
/// column headers.
pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut buf = String::from("estimator,mad_e3,variance_e6,p_vs_reference\n");
    for r in rows {
        let p = r.p_vs_reference.map(|p| format!("{p}")).unwrap_or_default();
        buf.push_str(&format!("{},{},{},{}\n", r.estimator, r.mad_e3, r.variance_e6, p));
    }
    atomic_write(path, buf.as_bytes())
}

/// Write a single report as full JSON or as a one-row summary CSV.
pub fn write_report(report: &BacktestReport, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let json = serde_json::to_vec_pretty(report)?;
            atomic_write(path, &json)
        }
        ReportFormat::Csv => {
            write_summary_csv(&[SummaryRow::from_report(report, None)], path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{
        generate_panel, make_generator_params, true_covariance, GeneratorSpec, NoiseDistribution,
        NoiseSpec,
    };
    use approx::assert_abs_diff_eq;

    fn synthetic_panel(n: usize, t: usize, seed: u64) -> (crate::types::FactorModelParams, ReturnsPanel) {
        let spec = GeneratorSpec {
            n_assets: n,
            n_obs: t,
            factor_strengths: vec![5.0, 2.0],
            noise: NoiseSpec::Range([0.5, 1.5]),
            noise_distribution: NoiseDistribution::Gaussian,
            seed,
        };
        let params = make_generator_params(&spec).unwrap();
        let panel = generate_panel(&params, t, NoiseDistribution::Gaussian, seed ^ 0xf00d).unwrap();
        (params, panel)
    }

    fn base_config(subset_size: usize, n_subsets: usize, window: usize) -> BacktestConfig {
        BacktestConfig {
            window,
            subset_size,
            n_subsets,
            estimator: EstimatorSpec::Sample,
            regularization: Regularization::None,
            rebalance_every: 1,
            seed: 11,
        }
    }

    #[test]
    fn subset_sample_shapes_and_determinism() {
        let a = subset_sample(10, 4, 7, 3).unwrap();
        let b = subset_sample(10, 4, 7, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        for s in &a {
            assert_eq!(s.len(), 4);
            for w in s.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(s.iter().all(|&i| i < 10));
        }
        // full-universe subsets
        let full = subset_sample(5, 5, 3, 1).unwrap();
        for s in &full {
            assert_eq!(s, &vec![0, 1, 2, 3, 4]);
        }
        assert!(subset_sample(5, 6, 1, 0).is_err());
    }

    #[test]
    fn subset_sample_uniform_chi_square() {
        // n = 1, J = 1000, N = 10: frequencies ~ 100; chi^2(9) 1% critical 21.67
        let sets = subset_sample(10, 1, 1000, 42).unwrap();
        let mut freq = [0usize; 10];
        for s in &sets {
            freq[s[0]] += 1;
        }
        let chi2: f64 = freq.iter().map(|&f| (f as f64 - 100.0).powi(2) / 100.0).sum();
        assert!(chi2 < 21.67, "chi-square statistic {chi2}");
    }

    #[test]
    fn single_asset_backtest_is_trailing_mean_deviation() {
        let mut rng = rng_from_seed(5);
        let panel = ReturnsPanel::from_matrix(DMatrix::from_fn(80, 1, |_, _| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        }))
        .unwrap();
        let config = base_config(1, 3, 20);
        let report = run_backtest(&panel, &config).unwrap();
        let r = panel.returns();
        // independent loop: w = (1), deviation = r_t - trailing mean
        let mut sq = Vec::new();
        let mut ab = Vec::new();
        for t in 20..80 {
            let mean: f64 = (t - 20..t).map(|s| r[(s, 0)]).sum::<f64>() / 20.0;
            let d = r[(t, 0)] - mean;
            sq.push(d * d);
            ab.push(d.abs());
        }
        assert_abs_diff_eq!(
            report.realized_variance,
            sq.iter().sum::<f64>() / sq.len() as f64,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            report.realized_mad,
            ab.iter().sum::<f64>() / ab.len() as f64,
            epsilon = 1e-12
        );
        assert_eq!(report.per_period.len(), 60);
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let (_, panel) = synthetic_panel(12, 120, 9);
        let config = base_config(6, 5, 40);
        let a = run_backtest(&panel, &config).unwrap();
        let b = run_backtest(&panel, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_subsets_equal_single_subset() {
        // J identical subsets (subset_size = N forces them identical)
        let (_, panel) = synthetic_panel(5, 100, 21);
        let mut config = base_config(5, 7, 30);
        let many = run_backtest(&panel, &config).unwrap();
        config.n_subsets = 1;
        let one = run_backtest(&panel, &config).unwrap();
        assert_eq!(many.realized_variance, one.realized_variance);
        assert_eq!(many.realized_mad, one.realized_mad);
    }

    #[test]
    fn strict_causality_future_perturbation_is_inert() {
        let (_, panel) = synthetic_panel(6, 90, 33);
        let config = base_config(4, 4, 30);
        let full = run_backtest(&panel, &config).unwrap();
        // corrupt everything from day 60 onward; periods before it must agree
        let mut corrupted = panel.returns().clone();
        let mut rng = rng_from_seed(0xdead);
        for t in 60..90 {
            for j in 0..6 {
                corrupted[(t, j)] =
                    100.0 + rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
            }
        }
        let alt = ReturnsPanel::new(
            corrupted,
            panel.asset_ids().to_vec(),
            panel.time_index().to_vec(),
        )
        .unwrap();
        let altered = run_backtest(&alt, &config).unwrap();
        // out-of-sample day 60 has index 30 in per_period (window 30)
        for p in 0..30 {
            assert_eq!(full.per_period[p], altered.per_period[p]);
        }
    }

    #[test]
    fn report_metrics_match_independent_recomputation() {
        let (_, panel) = synthetic_panel(8, 110, 55);
        let config = base_config(4, 6, 40);
        let report = run_backtest(&panel, &config).unwrap();
        let n = report.per_period.len() as f64;
        let var: f64 = report.per_period.iter().map(|r| r.sq_dev).sum::<f64>() / n;
        let mad: f64 = report.per_period.iter().map(|r| r.abs_dev).sum::<f64>() / n;
        assert_abs_diff_eq!(report.realized_variance, var, epsilon = 1e-12);
        assert_abs_diff_eq!(report.realized_mad, mad, epsilon = 1e-12);
        assert!(report.realized_variance >= 0.0 && report.realized_mad >= 0.0);
    }

    #[test]
    fn true_covariance_beats_equal_weights_on_average() {
        // oracle-vs-naive ordering, paired over periods and seeds
        let mut wins = 0usize;
        let mut total = 0usize;
        for seed in 0..4 {
            let (params, panel) = synthetic_panel(20, 260, 100 + seed);
            let dir = tempfile::tempdir().unwrap();
            let cov_path = dir.path().join("true.csv");
            write_matrix_csv(true_covariance(&params).matrix(), &cov_path).unwrap();
            let mut config = base_config(10, 8, 150);
            config.estimator = EstimatorSpec::FixedCovariance {
                matrix_csv: cov_path.display().to_string(),
            };
            let oracle = run_backtest(&panel, &config).unwrap();
            // equal weights = min variance under an identity covariance
            let eye_path = dir.path().join("eye.csv");
            write_matrix_csv(&DMatrix::identity(20, 20), &eye_path).unwrap();
            config.estimator = EstimatorSpec::FixedCovariance {
                matrix_csv: eye_path.display().to_string(),
            };
            let naive = run_backtest(&panel, &config).unwrap();
            if oracle.realized_variance <= naive.realized_variance {
                wins += 1;
            }
            total += 1;
        }
        assert!(wins * 2 > total, "oracle won only {wins}/{total} seeds");
    }

    #[test]
    fn lambda_sweep_shares_the_plain_path_at_zero() {
        let (_, panel) = synthetic_panel(10, 100, 77);
        let mut config = base_config(8, 4, 40);
        config.regularization = Regularization::RidgePath { lambdas: vec![0.0, 0.1, 1.0] };
        let sweep = run_lambda_sweep(&panel, &config).unwrap();
        let points = sweep.per_lambda.as_ref().unwrap();
        assert_eq!(points.len(), 3);
        config.regularization = Regularization::None;
        let plain = run_backtest(&panel, &config).unwrap();
        assert_eq!(points[0].variance, plain.realized_variance);
        assert_eq!(points[0].mad, plain.realized_mad);
        assert_eq!(sweep.per_period, plain.per_period);
    }

    #[test]
    fn lambda_sweep_large_lambda_matches_inverse_variance_limit() {
        let (_, panel) = synthetic_panel(6, 90, 88);
        let mut config = base_config(5, 3, 30);
        config.regularization = Regularization::RidgePath { lambdas: vec![1e9] };
        let sweep = run_lambda_sweep(&panel, &config).unwrap();
        // independent inverse-variance backtest
        let subsets = subset_sample(6, 5, 3, derive_seed(config.seed, 0x5e7)).unwrap();
        let mut per_period = vec![(0.0, 0usize); 60];
        for subset in &subsets {
            for p in 0..60 {
                let t = 30 + p;
                let w_panel = panel.slice(t - 30, t, subset).unwrap();
                let metric = asset_variance_metric(&w_panel).unwrap();
                let inv: Vec<f64> = metric.diag().iter().map(|v| 1.0 / v).collect();
                let z: f64 = inv.iter().sum();
                let r_hat = column_means(w_panel.returns());
                let mut d = 0.0;
                for (i, &a) in subset.iter().enumerate() {
                    d += inv[i] / z * (panel.returns()[(t, a)] - r_hat[i]);
                }
                per_period[p].0 += d * d;
                per_period[p].1 += 1;
            }
        }
        let var: f64 =
            per_period.iter().map(|(s, c)| s / *c as f64).sum::<f64>() / per_period.len() as f64;
        let got = sweep.per_lambda.unwrap()[0].variance;
        assert!(
            (got - var).abs() < 1e-6 * var.max(1e-12),
            "sweep {got} vs inverse-variance oracle {var}"
        );
    }

    #[test]
    fn ridge_helps_on_small_windows_with_sample_estimator() {
        // T barely above subset size: the sample covariance is noisy and
        // regularization should lower realized variance somewhere on the path
        let (_, panel) = synthetic_panel(30, 220, 99);
        let mut config = base_config(25, 6, 30);
        config.regularization = Regularization::RidgePath {
            lambdas: vec![0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0],
        };
        let sweep = run_lambda_sweep(&panel, &config).unwrap();
        let points = sweep.per_lambda.unwrap();
        let at_zero = points[0].variance;
        let best = points.iter().map(|p| p.variance).fold(f64::INFINITY, f64::min);
        assert!(best < at_zero, "min over path {best} vs lambda=0 {at_zero}");
    }

    #[test]
    fn rebalance_every_one_matches_explicit_default_and_coarser_runs() {
        let (_, panel) = synthetic_panel(8, 100, 13);
        let mut config = base_config(5, 4, 40);
        config.rebalance_every = 1;
        let daily = run_backtest(&panel, &config).unwrap();
        config.rebalance_every = 5;
        let coarse = run_backtest(&panel, &config).unwrap();
        assert_eq!(daily.per_period.len(), coarse.per_period.len());
        assert_ne!(daily.realized_variance, coarse.realized_variance);
        // same number of valid periods, nothing skipped
        assert_eq!(coarse.meta["n_skipped"], 0.0);
    }

    #[test]
    fn skip_threshold_trips_on_persistent_failure() {
        // constant column makes every sample covariance singular
        let t = 60;
        let mut m = DMatrix::from_fn(t, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        for i in 0..t {
            m[(i, 2)] = 0.004;
        }
        let panel = ReturnsPanel::from_matrix(m).unwrap();
        let config = base_config(3, 2, 20);
        match run_backtest(&panel, &config) {
            Err(Error::TooManySkips { skipped, total, .. }) => {
                assert_eq!(skipped, total);
            }
            other => panic!("expected TooManySkips, got {other:?}"),
        }
    }

    #[test]
    fn significance_identical_series_is_one() {
        let a = vec![0.4, 0.1, 0.9, 0.3];
        let p = significance_randomization(&a, &a, 1000, 1).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn significance_large_constant_shift_is_tiny() {
        let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 50.0).collect();
        let p = significance_randomization(&a, &b, 1000, 2).unwrap();
        assert!(p <= 0.002, "p = {p}");
    }

    #[test]
    fn significance_monte_carlo_matches_exhaustive_for_n12() {
        let mut rng = rng_from_seed(17);
        let a: Vec<f64> = (0..12).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let b: Vec<f64> = (0..12).map(|_| rand::Rng::gen::<f64>(&mut rng) * 0.8).collect();
        // 2^12 = 4096 <= 4096 -> exhaustive branch
        let exact = significance_randomization(&a, &b, 4096, 0).unwrap();
        // independent exhaustive oracle
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let obs = d.iter().sum::<f64>().abs() / 12.0;
        let mut count = 0;
        for mask in 0u32..4096 {
            let s: f64 = d
                .iter()
                .enumerate()
                .map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x })
                .sum();
            if (s / 12.0).abs() >= obs - 1e-15 {
                count += 1;
            }
        }
        assert_abs_diff_eq!(exact, count as f64 / 4096.0, epsilon = 1e-12);
        // MC with many draws approximates the exact answer
        let mc = significance_randomization(&a, &b, 4095, 5).unwrap();
        assert!((mc - exact).abs() < 0.05, "mc {mc} vs exact {exact}");
    }

    #[test]
    fn significance_rejects_length_mismatch() {
        assert!(significance_randomization(&[1.0], &[1.0, 2.0], 100, 0).is_err());
    }

    #[test]
    fn returns_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let panel = ReturnsPanel::new(
            DMatrix::from_row_slice(3, 2, &[0.01, -0.02, 0.003, 0.0004, -0.5, 0.25]),
            vec!["aa".into(), "bb".into()],
            vec!["2020-01-01".into(), "2020-01-02".into(), "2020-01-03".into()],
        )
        .unwrap();
        write_returns_csv(&panel, &path).unwrap();
        let loaded = load_returns_csv(&path).unwrap();
        assert_eq!(loaded.returns(), panel.returns());
        assert_eq!(loaded.asset_ids(), panel.asset_ids());
        assert_eq!(loaded.time_index(), panel.time_index());
    }

    #[test]
    fn returns_csv_rejects_bad_cells_with_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "date,x,y\n2020-01-01,0.1,0.2\n2020-01-02,NaN,0.3\n").unwrap();
        match load_returns_csv(&path) {
            Err(Error::Csv(msg)) => assert!(msg.contains("row 3"), "message: {msg}"),
            other => panic!("expected csv error, got {other:?}"),
        }
        fs::write(&path, "date,x\n2020-01-02,0.1\n2020-01-01,0.2\n").unwrap();
        assert!(load_returns_csv(&path).is_err(), "non-monotone dates accepted");
        fs::write(&path, "date,x\n2020-01-01,0.1\n2020-01-01,0.2\n").unwrap();
        assert!(load_returns_csv(&path).is_err(), "duplicate dates accepted");
        fs::write(&path, "time,x\n2020-01-01,0.1\n").unwrap();
        assert!(load_returns_csv(&path).is_err(), "bad header accepted");
    }

    #[test]
    fn large_generated_csv_round_trips_through_sample_covariance() {
        let (_, panel) = synthetic_panel(100, 10_000, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.csv");
        write_returns_csv(&panel, &path).unwrap();
        let loaded = load_returns_csv(&path).unwrap();
        let a = sample_covariance(&panel).unwrap();
        let b = sample_covariance(&loaded).unwrap();
        let rel = crate::linalg::frobenius_relative(a.matrix(), b.matrix());
        assert!(rel < 1e-12, "relative deviation {rel}");
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[1.5, -2.25, 1e-17, 0.1, 3.0, -0.0625]);
        write_matrix_csv(&m, &path).unwrap();
        assert_eq!(load_matrix_csv(&path).unwrap(), m);
    }

    #[test]
    fn report_json_round_trip_and_csv_scaling() {
        let (_, panel) = synthetic_panel(6, 80, 7);
        let config = base_config(4, 3, 30);
        let report = run_backtest(&panel, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("report.json");
        write_report(&report, &jpath, ReportFormat::Json).unwrap();
        let loaded: BacktestReport =
            serde_json::from_slice(&fs::read(&jpath).unwrap()).unwrap();
        assert_eq!(loaded, report);
        // per_lambda omitted from JSON when empty
        assert!(!fs::read_to_string(&jpath).unwrap().contains("per_lambda"));
        let cpath = dir.path().join("report.csv");
        write_report(&report, &cpath, ReportFormat::Csv).unwrap();
        let text = fs::read_to_string(&cpath).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "estimator,mad_e3,variance_e6,p_vs_reference");
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "sample");
        assert_abs_diff_eq!(
            fields[1].parse::<f64>().unwrap(),
            report.realized_mad * 1e3,
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            fields[2].parse::<f64>().unwrap(),
            report.realized_variance * 1e6,
            epsilon = 0.0
        );
    }

    #[test]
    fn config_json_round_trip() {
        let config = BacktestConfig {
            window: 150,
            subset_size: 40,
            n_subsets: 50,
            estimator: EstimatorSpec::DvaFa {
                n_factors: 7,
                k_runs: 20,
                em: EmOptions::default(),
            },
            regularization: Regularization::Ridge { lambda: 0.5 },
            rebalance_every: 5,
            seed: 4,
        };
        let json = serde_json::to_string(&config).unwrap();
        let back: BacktestConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        // defaults fill in omitted fields
        let minimal: BacktestConfig = serde_json::from_str(
            r#"{"subset_size": 10, "estimator": {"type": "sample"}}"#,
        )
        .unwrap();
        assert_eq!(minimal.window, 150);
        assert_eq!(minimal.n_subsets, 1000);
        assert_eq!(minimal.rebalance_every, 1);
        assert_eq!(minimal.regularization, Regularization::None);
    }

    #[test]
    fn estimator_variants_run_end_to_end() {
        let (params, panel) = synthetic_panel(10, 120, 19);
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(6, 2, 60);
        config.estimator = EstimatorSpec::Shrinkage {
            target: ShrinkageTarget::DiagonalVariances,
            intensity: Intensity::Auto,
        };
        assert!(run_backtest(&panel, &config).is_ok());
        config.estimator = EstimatorSpec::Fa { n_factors: 2, em: EmOptions::default() };
        assert!(run_backtest(&panel, &config).is_ok());
        config.estimator = EstimatorSpec::Resampled { n_resamples: 5 };
        assert!(run_backtest(&panel, &config).is_ok());
        // exogenous: use the true factor realizations as the series
        let mut rng = rng_from_seed(23);
        let f = DMatrix::from_fn(120, 2, |_, _| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        let fpath = dir.path().join("factors.csv");
        let fpanel = ReturnsPanel::from_matrix(f).unwrap();
        write_returns_csv(&fpanel, &fpath).unwrap();
        config.estimator = EstimatorSpec::Exogenous { factors_csv: fpath.display().to_string() };
        assert!(run_backtest(&panel, &config).is_ok());
        let _ = params;
    }
}
