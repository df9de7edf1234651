//! End-to-end checks of the `dvacov` binary: reproducibility of every
//! subcommand across reruns and thread counts, exit-code contracts, and
//! consistency of the adjustment outputs.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dvacov"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// sha256 of every file in a directory, keyed by file name.
fn checksums(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let bytes = fs::read(entry.path()).unwrap();
        out.insert(
            entry.file_name().to_string_lossy().into_owned(),
            hex::encode(Sha256::digest(&bytes)),
        );
    }
    out
}

fn run_ok(subcommand: &str, config: &Path, out: &Path, threads: usize) {
    let output = bin()
        .args([
            subcommand,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            &threads.to_string(),
            "--quiet",
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{subcommand} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn gen_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("gen.json");
    write(
        &path,
        r#"{"n_assets": 10, "n_obs": 120, "factor_strengths": [5.0, 2.0],
            "noise_range": [0.5, 1.5], "noise_distribution": {"type": "gaussian"},
            "seed": 7, "n_obs_list": [120]}"#,
    );
    path
}

#[test]
fn every_subcommand_is_deterministic_across_reruns_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let gen_cfg = gen_config(d);
    let returns = d.join("gen1/returns_t120.csv").display().to_string();
    write(
        &d.join("spectrum.json"),
        r#"{"n_assets": 30, "n_obs_list": [20, 90], "reps": 2, "seed": 3}"#,
    );
    write(
        &d.join("bias.json"),
        r#"{"n_assets": 8, "factor_strengths": [5.0, 1.0], "m_fit": 2,
            "n_obs_list": [25], "reps": 4, "k_runs": 4, "seed": 5}"#,
    );
    write(
        &d.join("adjust.json"),
        &format!(r#"{{"returns_csv": "{returns}", "n_factors": 2, "k_runs": 6, "seed": 9}}"#),
    );
    write(
        &d.join("backtest.json"),
        &format!(
            r#"{{"returns_csv": "{returns}", "estimators":
                [{{"type": "sample"}}, {{"type": "dva_fa", "n_factors": 2, "k_runs": 4}}],
                "window": 40, "subset_size": 6, "n_subsets": 3, "n_perm": 200, "seed": 11}}"#
        ),
    );
    write(
        &d.join("sweep.json"),
        &format!(
            r#"{{"returns_csv": "{returns}", "estimators": [{{"type": "sample"}}],
                "window": 40, "subset_size": 6, "n_subsets": 3,
                "regularization": {{"type": "ridge_path", "lambdas": [0.0, 0.5]}},
                "n_perm": 100, "seed": 13}}"#
        ),
    );

    // gen must run first so the other commands can read its panel
    run_ok("gen", &gen_cfg, &d.join("gen1"), 1);
    run_ok("gen", &gen_cfg, &d.join("gen2"), 2);
    assert_eq!(checksums(&d.join("gen1")), checksums(&d.join("gen2")));

    for (sub, cfg) in [
        ("spectrum", "spectrum.json"),
        ("bias-sim", "bias.json"),
        ("adjust", "adjust.json"),
        ("backtest", "backtest.json"),
        ("sweep", "sweep.json"),
    ] {
        let out1 = d.join(format!("{sub}_1"));
        let out2 = d.join(format!("{sub}_2"));
        run_ok(sub, &d.join(cfg), &out1, 1);
        run_ok(sub, &d.join(cfg), &out2, 2);
        assert_eq!(checksums(&out1), checksums(&out2), "{sub} outputs differ");
    }
}

#[test]
fn invalid_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.json");
    write(
        &cfg,
        r#"{"n_assets": 10, "n_obs": 50, "factor_strengths": [2.0],
            "noise_range": [0.5, 1.5],
            "noise_distribution": {"type": "student_t", "kurtosis": -3.0}, "seed": 1}"#,
    );
    let out = d.join("out");
    let output = bin()
        .args(["gen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("kurtosis"), "stderr: {stderr}");
    assert!(!out.exists(), "invalid config produced output files");
}

#[test]
fn unknown_config_field_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.json");
    write(&cfg, r#"{"n_assets": 30, "n_obs_list": [20], "repz": 3}"#);
    let output = bin()
        .args([
            "spectrum",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            d.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("repz"), "stderr: {stderr}");
}

#[test]
fn estimator_failure_exits_1_but_reports_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok("gen", &gen_config(d), &d.join("gen"), 1);
    let returns = d.join("gen/returns_t120.csv").display().to_string();
    let cfg = d.join("bt.json");
    // the exogenous estimator points at a missing file and fails at resolve
    // time inside the run, while the sample estimator still completes
    write(
        &cfg,
        &format!(
            r#"{{"returns_csv": "{returns}", "estimators":
                [{{"type": "sample"}}, {{"type": "exogenous", "factors_csv": "{}"}}],
                "window": 40, "subset_size": 5, "n_subsets": 2, "n_perm": 100, "seed": 3}}"#,
            d.join("missing.csv").display()
        ),
    );
    let out = d.join("out");
    let output = bin()
        .args([
            "backtest",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(out.join("report_sample.json").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("sample,")));
}

#[test]
fn adjust_outputs_satisfy_the_directional_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok("gen", &gen_config(d), &d.join("gen"), 1);
    let returns = d.join("gen/returns_t120.csv").display().to_string();
    let cfg = d.join("adjust.json");
    write(
        &cfg,
        &format!(r#"{{"returns_csv": "{returns}", "n_factors": 2, "k_runs": 8, "seed": 21}}"#),
    );
    let out = d.join("out");
    run_ok("adjust", &cfg, &out, 1);

    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    let s: Vec<f64> = meta["s"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let sigma2: Vec<f64> = meta["directional_variance_fa"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();

    let parse_matrix = |text: &str, skip_header: bool| -> Vec<Vec<f64>> {
        text.lines()
            .skip(if skip_header { 1 } else { 0 })
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect()
    };
    let adjusted = parse_matrix(&fs::read_to_string(out.join("dva_covariance.csv")).unwrap(), true);
    let basis = parse_matrix(&fs::read_to_string(out.join("basis.csv")).unwrap(), false);
    let n = adjusted.len();
    assert_eq!(s.len(), n);
    // p_i' C_dva p_i must equal sigma_i^2 / s_i for every basis direction
    for i in 0..n {
        let p: Vec<f64> = (0..n).map(|r| basis[r][i]).collect();
        let mut q = 0.0;
        for r in 0..n {
            for c in 0..n {
                q += p[r] * adjusted[r][c] * p[c];
            }
        }
        let expect = sigma2[i] / s[i];
        assert!(
            (q - expect).abs() <= 1e-9 * expect.abs().max(1e-12),
            "direction {i}: {q} vs {expect}"
        );
    }
}

#[test]
fn sweep_zero_lambda_row_matches_plain_backtest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_ok("gen", &gen_config(d), &d.join("gen"), 1);
    let returns = d.join("gen/returns_t120.csv").display().to_string();
    write(
        &d.join("bt.json"),
        &format!(
            r#"{{"returns_csv": "{returns}", "estimators": [{{"type": "sample"}}],
                "window": 40, "subset_size": 6, "n_subsets": 3, "n_perm": 100, "seed": 31}}"#
        ),
    );
    write(
        &d.join("sw.json"),
        &format!(
            r#"{{"returns_csv": "{returns}", "estimators": [{{"type": "sample"}}],
                "window": 40, "subset_size": 6, "n_subsets": 3,
                "regularization": {{"type": "ridge_path", "lambdas": [0.0, 0.3]}},
                "n_perm": 100, "seed": 31}}"#
        ),
    );
    run_ok("backtest", &d.join("bt.json"), &d.join("bt"), 1);
    run_ok("sweep", &d.join("sw.json"), &d.join("sw"), 1);
    let plain: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("bt/report_sample.json")).unwrap())
            .unwrap();
    let sweep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("sw/report_sample.json")).unwrap())
            .unwrap();
    assert_eq!(sweep["per_lambda"][0]["variance"], plain["realized_variance"]);
    assert_eq!(sweep["per_lambda"][0]["mad"], plain["realized_mad"]);
}

#[test]
fn manifest_records_config_hash_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = gen_config(d);
    let out = d.join("out");
    let output = bin()
        .args([
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "99",
            "--quiet",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen");
    assert_eq!(manifest["seed"], 99);
    let expected = hex::encode(Sha256::digest(fs::read(&cfg).unwrap()));
    assert_eq!(manifest["config_sha256"], expected.as_str());
}
