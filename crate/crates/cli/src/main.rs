//! `dvacov` command line: config-driven synthetic generation, spectrum and
//! bias studies, covariance adjustment, and rolling-window backtests, all
//! emitting plot-ready CSV/JSON plus a reproducibility manifest.

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dvacov::backtest::{
    atomic_write, load_returns_csv, run_backtest, run_lambda_sweep, significance_randomization,
    write_matrix_csv, write_returns_csv, write_summary_csv, BacktestConfig, BacktestReport,
    EstimatorSpec, Regularization, SummaryRow,
};
use dvacov::dva::{
    dva_adjust, dva_correction_factors, run_bias_study, subspace_bases, BiasStudyOptions,
};
use dvacov::estimators::{fa_fit_em, fm_covariance, sample_covariance, EmOptions};
use dvacov::linalg::{quadratic_forms, sym_eigen_desc};
use dvacov::rng::derive_seed;
use dvacov::synthgen::{
    generate_panel, make_generator_params, marchenko_pastur_support, standard_normal_panel,
    true_covariance, GeneratorSpec, NoiseDistribution, NoiseSpec,
};

#[derive(Parser)]
#[command(name = "dvacov", version, about = "Covariance estimation and portfolio-risk toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing)
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Override the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress output
    #[arg(long, global = true)]
    quiet: bool,

    /// Extra progress output
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic return panels from a factor-model spec
    Gen,
    /// Eigenvalue spectra of sample covariances of pure-noise panels
    Spectrum,
    /// Directional bias study: systematic error with and without adjustment
    BiasSim,
    /// Fit and bias-adjust a covariance matrix for one returns file
    Adjust,
    /// Rolling-window out-of-sample backtest across estimators
    Backtest,
    /// Backtest sweep over a ridge-regularization path
    Sweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Spectrum => "spectrum",
            Command::BiasSim => "bias-sim",
            Command::Adjust => "adjust",
            Command::Backtest => "backtest",
            Command::Sweep => "sweep",
        }
    }
}

/// Failures split by exit code: 2 = bad config, 1 = runtime.
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<dvacov::Error> for CliError {
    fn from(e: dvacov::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

struct Ctx {
    out: PathBuf,
    quiet: bool,
    verbose: bool,
}

impl Ctx {
    fn info(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn debug(&self, msg: &str) {
        if self.verbose && !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n < 1 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: failed to configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let raw = fs::read(config_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let ctx = Ctx { out: cli.out.clone(), quiet: cli.quiet, verbose: cli.verbose };

    let effective_seed = match &cli.command {
        Command::Gen => cmd_gen(&ctx, &raw, cli.seed)?,
        Command::Spectrum => cmd_spectrum(&ctx, &raw, cli.seed)?,
        Command::BiasSim => cmd_bias_sim(&ctx, &raw, cli.seed)?,
        Command::Adjust => cmd_adjust(&ctx, &raw, cli.seed)?,
        Command::Backtest => cmd_backtest(&ctx, &raw, cli.seed, false)?,
        Command::Sweep => cmd_backtest(&ctx, &raw, cli.seed, true)?,
    };

    let manifest = serde_json::json!({
        "subcommand": cli.command.name(),
        "config_sha256": hex::encode(Sha256::digest(&raw)),
        "seed": effective_seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    atomic_write(
        &ctx.path("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest is plain json").as_bytes(),
    )?;
    Ok(())
}

/// Deserialize a config, reporting the JSON pointer path of any violation.
fn parse_config<T: for<'de> Deserialize<'de>>(raw: &[u8]) -> CliResult<T> {
    let mut de = serde_json::Deserializer::from_slice(raw);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Config(format!("at /{}: {}", e.path(), e.inner())))
}

fn ensure_out_dir(ctx: &Ctx) -> CliResult<()> {
    fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", ctx.out.display())))
}

fn config_err(e: dvacov::Error) -> CliError {
    CliError::Config(e.to_string())
}

// ---------------------------------------------------------------- gen

#[derive(Deserialize)]
struct GenConfig {
    #[serde(flatten)]
    spec: GeneratorSpec,
    /// When set, one panel is generated per length (the spec's n_obs is
    /// still validated but unused for output).
    n_obs_list: Option<Vec<usize>>,
}

fn cmd_gen(ctx: &Ctx, raw: &[u8], seed_override: Option<u64>) -> CliResult<u64> {
    let mut config: GenConfig = parse_config(raw)?;
    if let Some(s) = seed_override {
        config.spec.seed = s;
    }
    config.spec.validate().map_err(config_err)?;
    let lengths = config.n_obs_list.clone().unwrap_or_else(|| vec![config.spec.n_obs]);
    if lengths.is_empty() || lengths.iter().any(|&t| t < 1) {
        return Err(CliError::Config("n_obs_list entries must be >= 1".into()));
    }
    let params = make_generator_params(&config.spec).map_err(config_err)?;
    ensure_out_dir(ctx)?;

    for (i, &t) in lengths.iter().enumerate() {
        let panel = generate_panel(
            &params,
            t,
            config.spec.noise_distribution,
            derive_seed(config.spec.seed, 1 + i as u64),
        )?;
        let name = format!("returns_t{t}.csv");
        write_returns_csv(&panel, &ctx.path(&name))?;
        ctx.info(&format!("wrote {name} ({t}x{})", config.spec.n_assets));
    }
    write_matrix_csv(true_covariance(&params).matrix(), &ctx.path("true_covariance.csv"))?;
    let mixing: Vec<Vec<f64>> = (0..params.n_factors())
        .map(|i| params.mixing().row(i).iter().cloned().collect())
        .collect();
    let sidecar = serde_json::json!({
        "n_assets": config.spec.n_assets,
        "n_factors": params.n_factors(),
        "factor_strengths": config.spec.factor_strengths,
        "mixing": mixing,
        "noise_variances": params.noise_var().iter().cloned().collect::<Vec<f64>>(),
        "seed": config.spec.seed,
    });
    atomic_write(
        &ctx.path("params.json"),
        serde_json::to_string_pretty(&sidecar).expect("sidecar is plain json").as_bytes(),
    )?;
    ctx.info("wrote true_covariance.csv, params.json");
    Ok(config.spec.seed)
}

// ------------------------------------------------------------ spectrum

fn default_bins() -> usize {
    50
}

fn default_reps() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumConfig {
    n_assets: usize,
    n_obs_list: Vec<usize>,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default = "default_bins")]
    n_bins: usize,
    #[serde(default)]
    seed: u64,
}

fn cmd_spectrum(ctx: &Ctx, raw: &[u8], seed_override: Option<u64>) -> CliResult<u64> {
    let mut config: SpectrumConfig = parse_config(raw)?;
    if let Some(s) = seed_override {
        config.seed = s;
    }
    if config.n_assets < 2 {
        return Err(CliError::Config("n_assets must be >= 2".into()));
    }
    if config.n_obs_list.is_empty() || config.n_obs_list.iter().any(|&t| t < 2) {
        return Err(CliError::Config("n_obs_list entries must be >= 2".into()));
    }
    if config.reps < 1 || config.n_bins < 1 {
        return Err(CliError::Config("reps and n_bins must be >= 1".into()));
    }
    ensure_out_dir(ctx)?;

    let n = config.n_assets;
    let mut support_rows = String::from(
        "n_obs,q,lambda_min,lambda_max,zero_mass,bin_width,zero_count_per_rep\n",
    );
    for (ti, &t) in config.n_obs_list.iter().enumerate() {
        let mut all_eigs: Vec<f64> = Vec::with_capacity(config.reps * n);
        let mut zero_count_total = 0usize;
        for rep in 0..config.reps {
            let panel = standard_normal_panel(
                t,
                n,
                derive_seed(config.seed, (ti * config.reps + rep) as u64),
            )?;
            let cov = sample_covariance(&panel)?;
            let (eigs, _) = sym_eigen_desc(cov.matrix());
            zero_count_total += eigs.iter().filter(|&&l| l.abs() < 1e-10).count();
            all_eigs.extend(eigs.iter());
        }
        all_eigs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));

        let mut eig_csv = String::from("eigenvalue\n");
        for l in &all_eigs {
            let _ = writeln!(eig_csv, "{l}");
        }
        atomic_write(&ctx.path(&format!("eigenvalues_t{t}.csv")), eig_csv.as_bytes())?;

        let q = t as f64 / n as f64;
        let support = marchenko_pastur_support(q)?;
        let max = all_eigs.last().copied().unwrap_or(1.0).max(support.lambda_max);
        let width = max / config.n_bins as f64;
        let mut counts = vec![0usize; config.n_bins];
        for &l in &all_eigs {
            let b = ((l / width) as usize).min(config.n_bins - 1);
            counts[b] += 1;
        }
        let total = all_eigs.len() as f64;
        let mut hist = String::from("bin_lo,bin_hi,count,density\n");
        for (b, &c) in counts.iter().enumerate() {
            let lo = b as f64 * width;
            let _ = writeln!(hist, "{lo},{},{c},{}", lo + width, c as f64 / (total * width));
        }
        atomic_write(&ctx.path(&format!("histogram_t{t}.csv")), hist.as_bytes())?;

        let _ = writeln!(
            support_rows,
            "{t},{q},{},{},{},{width},{}",
            support.lambda_min,
            support.lambda_max,
            support.zero_mass,
            zero_count_total as f64 / config.reps as f64,
        );
        ctx.debug(&format!("spectrum T={t}: {} eigenvalues", all_eigs.len()));
    }
    atomic_write(&ctx.path("mp_support.csv"), support_rows.as_bytes())?;
    ctx.info("wrote eigenvalue, histogram and mp_support files");
    Ok(config.seed)
}

// ------------------------------------------------------------ bias-sim

fn default_bias_n() -> usize {
    30
}

fn default_bias_strengths() -> Vec<f64> {
    vec![10.0, 3.0, 1.0]
}

fn default_bias_noise() -> [f64; 2] {
    [0.5, 1.5]
}

fn default_bias_lengths() -> Vec<usize> {
    vec![21, 30, 150]
}

fn default_bias_m() -> usize {
    3
}

fn default_bias_reps() -> usize {
    150
}

fn default_bias_k() -> Option<usize> {
    Some(100)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasSimConfig {
    #[serde(default = "default_bias_n")]
    n_assets: usize,
    #[serde(default = "default_bias_strengths")]
    factor_strengths: Vec<f64>,
    #[serde(default = "default_bias_noise")]
    noise_range: [f64; 2],
    #[serde(default = "default_bias_lengths")]
    n_obs_list: Vec<usize>,
    #[serde(default = "default_bias_m")]
    m_fit: usize,
    #[serde(default = "default_bias_reps")]
    reps: usize,
    /// Monte-Carlo runs per adjustment; null disables the adjusted arm.
    #[serde(default = "default_bias_k")]
    k_runs: Option<usize>,
    #[serde(default)]
    em: EmOptions,
    #[serde(default)]
    seed: u64,
}

fn cmd_bias_sim(ctx: &Ctx, raw: &[u8], seed_override: Option<u64>) -> CliResult<u64> {
    let mut config: BiasSimConfig = parse_config(raw)?;
    if let Some(s) = seed_override {
        config.seed = s;
    }
    if config.n_obs_list.is_empty() {
        return Err(CliError::Config("n_obs_list must be non-empty".into()));
    }
    let spec = GeneratorSpec {
        n_assets: config.n_assets,
        n_obs: *config.n_obs_list.iter().max().expect("non-empty"),
        factor_strengths: config.factor_strengths.clone(),
        noise: NoiseSpec::Range(config.noise_range),
        noise_distribution: NoiseDistribution::Gaussian,
        seed: config.seed,
    };
    spec.validate().map_err(config_err)?;
    if config.m_fit < 1 || config.m_fit >= config.n_assets {
        return Err(CliError::Config(format!(
            "m_fit must satisfy 1 <= m_fit < n_assets, got {}",
            config.m_fit
        )));
    }
    if config.factor_strengths.len() != config.m_fit {
        ctx.info(&format!(
            "warning: {} generator factor strengths but fitting M = {}",
            config.factor_strengths.len(),
            config.m_fit
        ));
    }
    if config.reps == 1 {
        ctx.info("warning: reps = 1, std columns will be NaN");
    }
    let params = make_generator_params(&spec).map_err(config_err)?;
    let opts = BiasStudyOptions { em: config.em.clone(), dva_k: config.k_runs };
    ensure_out_dir(ctx)?;

    for (i, &t) in config.n_obs_list.iter().enumerate() {
        let report = run_bias_study(
            &params,
            t,
            config.m_fit,
            config.reps,
            &opts,
            derive_seed(config.seed, 1 + i as u64),
        )?;
        atomic_write(
            &ctx.path(&format!("bias_t{t}.json")),
            serde_json::to_string_pretty(&report)
                .map_err(dvacov::Error::from)?
                .as_bytes(),
        )?;
        let mut csv = String::from(
            "direction,subspace,fa_s_mean,fa_a_mean,fa_s_std,dva_s_mean,dva_a_mean,dva_s_std,a_reduction_pct\n",
        );
        for d in 0..config.n_assets {
            let sub = if d < report.n_factors { "fs" } else { "oc" };
            let fa = &report.fa;
            let (ds, da, dd, red) = match &report.dva {
                Some(dva) => {
                    let red = if fa.a_mean[d] > 0.0 {
                        format!("{}", (1.0 - dva.a_mean[d] / fa.a_mean[d]) * 100.0)
                    } else {
                        String::new()
                    };
                    (
                        format!("{}", dva.s_mean[d]),
                        format!("{}", dva.a_mean[d]),
                        format!("{}", dva.s_std[d]),
                        red,
                    )
                }
                None => (String::new(), String::new(), String::new(), String::new()),
            };
            let _ = writeln!(
                csv,
                "{d},{sub},{},{},{},{ds},{da},{dd},{red}",
                fa.s_mean[d], fa.a_mean[d], fa.s_std[d],
            );
        }
        atomic_write(&ctx.path(&format!("bias_t{t}.csv")), csv.as_bytes())?;
        ctx.info(&format!(
            "T={t}: {} replications completed, {} skipped",
            report.n_reps, report.n_skipped
        ));
    }
    Ok(config.seed)
}

// -------------------------------------------------------------- adjust

fn default_adjust_k() -> usize {
    100
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjustConfig {
    returns_csv: String,
    n_factors: usize,
    #[serde(default = "default_adjust_k")]
    k_runs: usize,
    #[serde(default = "default_true")]
    write_fa: bool,
    #[serde(default)]
    em: EmOptions,
    #[serde(default)]
    seed: u64,
}

/// Matrix CSV with a header row of asset ids.
fn write_labeled_matrix_csv(m: &DMatrix<f64>, ids: &[String], path: &Path) -> dvacov::Result<()> {
    let mut buf = ids.join(",");
    buf.push('\n');
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                buf.push(',');
            }
            let _ = write!(buf, "{}", m[(i, j)]);
        }
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

fn cmd_adjust(ctx: &Ctx, raw: &[u8], seed_override: Option<u64>) -> CliResult<u64> {
    let mut config: AdjustConfig = parse_config(raw)?;
    if let Some(s) = seed_override {
        config.seed = s;
    }
    if config.n_factors < 1 {
        return Err(CliError::Config("n_factors must be >= 1".into()));
    }
    if config.k_runs < 1 {
        return Err(CliError::Config("k_runs must be >= 1".into()));
    }
    let panel = load_returns_csv(Path::new(&config.returns_csv))?;
    if config.n_factors >= panel.n_assets() {
        return Err(CliError::Config(format!(
            "n_factors {} must be below the {} assets in {}",
            config.n_factors,
            panel.n_assets(),
            config.returns_csv
        )));
    }
    ensure_out_dir(ctx)?;

    let (fit, trace) = fa_fit_em(&panel, config.n_factors, &config.em)?;
    let fit_cov = fm_covariance(&fit);
    let basis = subspace_bases(&fit, &fit_cov)?;
    let factors = dva_correction_factors(
        &fit,
        panel.n_obs(),
        config.k_runs,
        &config.em,
        derive_seed(config.seed, 1),
    )?;
    let adjusted = dva_adjust(&fit, &factors, &basis)?;

    write_labeled_matrix_csv(adjusted.matrix(), panel.asset_ids(), &ctx.path("dva_covariance.csv"))?;
    if config.write_fa {
        write_labeled_matrix_csv(fit_cov.matrix(), panel.asset_ids(), &ctx.path("fa_covariance.csv"))?;
    }
    write_matrix_csv(basis.directions(), &ctx.path("basis.csv"))?;
    let sigma2 = quadratic_forms(fit_cov.matrix(), basis.directions());
    let meta = serde_json::json!({
        "n_factors": config.n_factors,
        "k_runs": factors.k_runs,
        "n_clamped": factors.n_clamped,
        "em_iterations": trace.iterations,
        "em_converged": trace.converged,
        "s": factors.s,
        "directional_variance_fa": sigma2.iter().cloned().collect::<Vec<f64>>(),
        "psd_repaired": adjusted.meta().get("psd_repaired").copied().unwrap_or(0.0) > 0.0,
    });
    atomic_write(
        &ctx.path("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(dvacov::Error::from)?.as_bytes(),
    )?;
    ctx.info(&format!(
        "adjusted {}x{} covariance ({} EM iterations, {} corrections clamped)",
        panel.n_assets(),
        panel.n_assets(),
        trace.iterations,
        factors.n_clamped
    ));
    Ok(config.seed)
}

// ----------------------------------------------------- backtest / sweep

fn default_window() -> usize {
    150
}

fn default_n_subsets() -> usize {
    1000
}

fn default_rebalance() -> usize {
    1
}

fn default_reference() -> String {
    "dva_factor_analysis".into()
}

fn default_n_perm() -> usize {
    10_000
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BacktestCmdConfig {
    returns_csv: String,
    estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_window")]
    window: usize,
    subset_size: usize,
    #[serde(default = "default_n_subsets")]
    n_subsets: usize,
    #[serde(default = "default_rebalance")]
    rebalance_every: usize,
    #[serde(default)]
    regularization: Regularization,
    /// Estimator name the randomization p-values compare against.
    #[serde(default = "default_reference")]
    reference: String,
    #[serde(default = "default_n_perm")]
    n_perm: usize,
    #[serde(default)]
    seed: u64,
}

fn dedup_names(estimators: &[EstimatorSpec]) -> Vec<String> {
    let mut seen: std::collections::BTreeMap<String, usize> = Default::default();
    estimators
        .iter()
        .map(|e| {
            let base = e.name().to_string();
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}_{n}")
            }
        })
        .collect()
}

fn cmd_backtest(ctx: &Ctx, raw: &[u8], seed_override: Option<u64>, sweep: bool) -> CliResult<u64> {
    let mut config: BacktestCmdConfig = parse_config(raw)?;
    if let Some(s) = seed_override {
        config.seed = s;
    }
    if config.estimators.is_empty() {
        return Err(CliError::Config("estimators list must be non-empty".into()));
    }
    if config.n_perm < 1 {
        return Err(CliError::Config("n_perm must be >= 1".into()));
    }
    match (&config.regularization, sweep) {
        (Regularization::RidgePath { .. }, false) => {
            return Err(CliError::Config(
                "ridge_path regularization requires the sweep subcommand".into(),
            ));
        }
        (Regularization::RidgePath { .. }, true) => {}
        (_, true) => {
            return Err(CliError::Config(
                "sweep requires a ridge_path regularization".into(),
            ));
        }
        (_, false) => {}
    }
    let panel = load_returns_csv(Path::new(&config.returns_csv))?;
    // validate every estimator's run config before any work starts
    let names = dedup_names(&config.estimators);
    for est in &config.estimators {
        let bc = BacktestConfig {
            window: config.window,
            subset_size: config.subset_size,
            n_subsets: config.n_subsets,
            estimator: est.clone(),
            regularization: config.regularization.clone(),
            rebalance_every: config.rebalance_every,
            seed: config.seed,
        };
        bc.validate(panel.n_assets()).map_err(config_err)?;
    }
    ensure_out_dir(ctx)?;

    let mut reports: Vec<Option<BacktestReport>> = Vec::with_capacity(config.estimators.len());
    let mut any_failed = false;
    for (est, name) in config.estimators.iter().zip(&names) {
        let bc = BacktestConfig {
            window: config.window,
            subset_size: config.subset_size,
            n_subsets: config.n_subsets,
            estimator: est.clone(),
            regularization: config.regularization.clone(),
            rebalance_every: config.rebalance_every,
            seed: config.seed,
        };
        let run = if sweep { run_lambda_sweep(&panel, &bc) } else { run_backtest(&panel, &bc) };
        match run {
            Ok(report) => {
                atomic_write(
                    &ctx.path(&format!("report_{name}.json")),
                    serde_json::to_string_pretty(&report)
                        .map_err(dvacov::Error::from)?
                        .as_bytes(),
                )?;
                if let Some(points) = &report.per_lambda {
                    let mut csv = String::from("lambda,mad,variance\n");
                    for p in points {
                        let _ = writeln!(csv, "{},{},{}", p.lambda, p.mad, p.variance);
                    }
                    atomic_write(&ctx.path(&format!("sweep_{name}.csv")), csv.as_bytes())?;
                }
                ctx.info(&format!(
                    "{name}: realized variance {:.6e}, mad {:.6e}",
                    report.realized_variance, report.realized_mad
                ));
                reports.push(Some(report));
            }
            Err(e) => {
                ctx.info(&format!("{name}: failed: {e}"));
                any_failed = true;
                reports.push(None);
            }
        }
    }

    // p-values against the reference estimator's per-period squared losses
    let ref_idx = names
        .iter()
        .position(|n| *n == config.reference)
        .or_else(|| reports.iter().position(|r| r.is_some()));
    let ref_series: Option<Vec<f64>> = ref_idx
        .and_then(|i| reports[i].as_ref())
        .map(|r| r.per_period.iter().map(|p| p.sq_dev).collect());
    let mut rows = Vec::new();
    for (i, (report, name)) in reports.iter().zip(&names).enumerate() {
        let Some(report) = report else { continue };
        let p = match (&ref_series, ref_idx) {
            (Some(reference), Some(ri)) if ri != i => {
                let mine: Vec<f64> = report.per_period.iter().map(|p| p.sq_dev).collect();
                if mine.len() == reference.len() {
                    Some(significance_randomization(
                        &mine,
                        reference,
                        config.n_perm,
                        derive_seed(config.seed, 0x5151 + i as u64),
                    )?)
                } else {
                    ctx.info(&format!(
                        "{name}: period count differs from reference, no p-value"
                    ));
                    None
                }
            }
            _ => None,
        };
        rows.push(SummaryRow::from_report(report, p));
    }
    write_summary_csv(&rows, &ctx.path("summary.csv"))?;
    ctx.info("wrote summary.csv");
    if any_failed {
        return Err(CliError::Runtime("one or more estimators failed".into()));
    }
    Ok(config.seed)
}
