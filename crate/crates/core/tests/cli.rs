mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kroprofac::estimator::{kro_pro_fac, predict, FitOptions};
use kroprofac::io::{read_csv_records, read_matrix, write_matrix};
use kroprofac::mle::MleState;
use kroprofac::simgen::gen_dataset;
use kroprofac::tensor::kron;
use kroprofac::{two_group_analysis, DatasetSeeds, Dims, Mat, TwoGroupOptions};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kroprofac"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dump replicate 0 of a small identity-noise config into `dir`.
fn dump(tmp: &TempDir, d_true: usize, seed: u64, n: usize) -> PathBuf {
    let dir = tmp.path().join(format!("dump_{d_true}_{seed}"));
    let seed = seed.to_string();
    let n = n.to_string();
    let d = d_true.to_string();
    let out = tmp.path().join("sim");
    ok(&[
        "--threads", "1", "simulate", "--p1", "5", "--p2", "4", "--q1", "2", "--q2", "3", "--d-true", &d,
        "--n-grid", &n, "--methods", "kpf", "--replicates", "1", "--seed-base", &seed, "--output", s(&out),
        "--dump", s(&dir),
    ]);
    dir
}

fn dims() -> Dims {
    Dims::new(5, 4, 2, 3).unwrap()
}

#[test]
fn fit_on_dumped_files_matches_library() {
    let tmp = TempDir::new().unwrap();
    let dir = dump(&tmp, 1, 41, 150);
    let out = tmp.path().join("fit");
    ok(&["fit", "--x", s(&dir.join("x.kmx")), "--y", s(&dir.join("y.kmx")), "--dims", "5,4,2,3", "--out", s(&out)]);

    let (data, truth) = gen_dataset(dims(), 1, 150, Some(kroprofac::NoiseModelSpec::identity()), DatasetSeeds::for_replicate(41, 0))
        .unwrap();
    let expected = kro_pro_fac(&data, &FitOptions::default()).unwrap();
    let text = std::fs::read_to_string(out.join("fit_report.json")).unwrap();
    // byte comparison: parsing JSON floats back is not guaranteed to round trip
    assert_eq!(text, serde_json::to_string_pretty(&expected).unwrap() + "\n");

    // the true factors written by the dump are the generating ones
    assert_eq!(read_matrix(&dir.join("true_beta1_1.csv")).unwrap(), truth.terms[0].beta1);
    assert_eq!(read_matrix(&dir.join("true_beta2_1.csv")).unwrap(), truth.terms[0].beta2);
}

#[test]
fn fixed_d_keeps_full_spectrum() {
    let tmp = TempDir::new().unwrap();
    let dir = dump(&tmp, 2, 42, 200);
    let out = tmp.path().join("fit");
    ok(&[
        "fit", "--x", s(&dir.join("x.kmx")), "--y", s(&dir.join("y.kmx")), "--dims", "5,4,2,3", "--d", "1", "--out",
        s(&out),
    ]);
    assert!(out.join("beta1_1.csv").exists());
    assert!(!out.join("beta1_2.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["d"], 1);
    assert_eq!(summary["d_selected"], 2);

    let (data, _) = gen_dataset(dims(), 2, 200, Some(kroprofac::NoiseModelSpec::identity()), DatasetSeeds::for_replicate(42, 0))
        .unwrap();
    let lib = kro_pro_fac(&data, &FitOptions::with_d(1)).unwrap();
    let rows = read_csv_records(&out.join("spectrum.csv")).unwrap();
    let sigmas: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(sigmas, lib.singular_values_all);
    assert!(sigmas[1] / sigmas[0] > 0.1, "second term should be visible in the spectrum");
}

#[test]
fn mle_fit_trace_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let dir = dump(&tmp, 1, 43, 120);
    let out = tmp.path().join("mle");
    ok(&[
        "fit", "--x", s(&dir.join("x.kmx")), "--y", s(&dir.join("y.kmx")), "--dims", "5,4,2,3", "--method", "mle",
        "--out", s(&out),
    ]);
    let state: MleState = serde_json::from_str(&std::fs::read_to_string(out.join("mle_state.json")).unwrap()).unwrap();
    assert!(state.loglik_trace.len() >= 2);
    for w in state.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
    }
    assert_eq!(read_matrix(&out.join("sigma1.csv")).unwrap().shape(), (5, 5));
}

#[test]
fn predict_uses_fitted_factors() {
    let tmp = TempDir::new().unwrap();
    let dir = dump(&tmp, 1, 44, 100);
    let fit = tmp.path().join("fit");
    ok(&["fit", "--x", s(&dir.join("x.kmx")), "--y", s(&dir.join("y.kmx")), "--dims", "5,4,2,3", "--out", s(&fit)]);
    let x_new = Mat::from_fn(2, 3, |i, j| (i as f64 + 1.0) * 0.5 - j as f64);
    let x_path = tmp.path().join("xnew.csv");
    write_matrix(&x_path, &x_new).unwrap();
    let y_path = tmp.path().join("ynew.csv");
    ok(&["predict", "--coef", s(&fit), "--x", s(&x_path), "--out", s(&y_path)]);
    let coeffs = kroprofac::cli::load_factors(&fit).unwrap();
    let got = read_matrix(&y_path).unwrap();
    assert_eq!(got.shape(), (5, 4));
    assert_eq!(got, predict(&coeffs, &x_new).unwrap());
}

fn spectrum_rows(path: &Path) -> Vec<(f64, f64)> {
    read_csv_records(path)
        .unwrap()
        .iter()
        .map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect()
}

#[test]
fn spectrum_of_identity_is_linear_raw_and_concentrated_rearranged() {
    let tmp = TempDir::new().unwrap();
    let m_path = tmp.path().join("eye.csv");
    write_matrix(&m_path, &Mat::identity(9, 9)).unwrap();
    let out = tmp.path().join("spec.csv");
    ok(&["spectrum", "--m", s(&m_path), "--dims", "3,3,3,3", "--out", s(&out)]);
    let rows = spectrum_rows(&out);
    assert_eq!(rows.len(), 9);
    for (k, (raw, re)) in rows.iter().enumerate() {
        assert!((raw - (k + 1) as f64 / 9.0).abs() < 1e-12, "raw f_{} = {raw}", k + 1);
        assert!((re - 1.0).abs() < 1e-12, "rearranged f_{} = {re}", k + 1);
    }
}

#[test]
fn spectrum_of_kronecker_product_matches_library() {
    let tmp = TempDir::new().unwrap();
    let b1 = Mat::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
    let b2 = Mat::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 0.25]);
    let m = kron(&b2, &b1);
    let m_path = tmp.path().join("m.csv");
    write_matrix(&m_path, &m).unwrap();
    let out = ok(&["spectrum", "--m", s(&m_path), "--dims", "3,2,2,2", "--k-max", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let dims = Dims::new(3, 2, 2, 2).unwrap();
    assert_eq!(text, kroprofac::cli::spectrum_csv(&m, &dims, Some(3)).unwrap());
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert!((first[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
}

fn write_group(dir: &Path, samples: &[Mat]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, m) in samples.iter().enumerate() {
        write_matrix(&dir.join(format!("subject_{i:03}.csv")), m).unwrap();
    }
}

fn rejections(path: &Path) -> Vec<bool> {
    read_csv_records(path).unwrap().iter().map(|r| r[5] == "true").collect()
}

#[test]
fn twogroup_matches_library_and_finds_planted_channels() {
    let tmp = TempDir::new().unwrap();
    let planted = [1, 4, 9];
    let g = common::planted_groups(7, (14, 16), 24, 12, &planted, 8.0);
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    write_group(&d1, &g.group1.samples);
    write_group(&d2, &g.group2.samples);

    let kpf = tmp.path().join("kpf");
    ok(&[
        "twogroup", "--group1", s(&d1), "--group2", s(&d2), "--dims", "24,12", "--d1", "1", "--d2", "1", "--out",
        s(&kpf),
    ]);
    let got = rejections(&kpf.join("channels.csv"));
    let opts = TwoGroupOptions { d1: Some(1), d2: Some(1), ..Default::default() };
    let lib = two_group_analysis(&g.group1, &g.group2, &opts).unwrap();
    assert_eq!(got, lib.rejected);
    for c in planted {
        assert!(got[c], "planted channel {c} not rejected");
    }

    let ols = tmp.path().join("ols");
    ok(&[
        "twogroup", "--group1", s(&d1), "--group2", s(&d2), "--d1", "1", "--d2", "1", "--ols-baseline", "--out",
        s(&ols),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ols.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["result"]["ols_baseline"], true);
}

#[test]
fn twogroup_identical_groups_reject_nothing() {
    let tmp = TempDir::new().unwrap();
    let g = common::planted_groups(8, (10, 10), 16, 6, &[], 0.0);
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    write_group(&d1, &g.group1.samples);
    write_group(&d2, &g.group1.samples);
    let out = tmp.path().join("out");
    ok(&["twogroup", "--group1", s(&d1), "--group2", s(&d2), "--out", s(&out)]);
    assert!(rejections(&out.join("channels.csv")).iter().all(|r| !r));
}

#[test]
fn twogroup_reports_offending_file() {
    let tmp = TempDir::new().unwrap();
    let g = common::planted_groups(9, (5, 5), 8, 4, &[], 0.0);
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    write_group(&d1, &g.group1.samples);
    write_group(&d2, &g.group2.samples);
    write_matrix(&d2.join("subject_999.csv"), &Mat::zeros(8, 3)).unwrap();
    let out = run(&["twogroup", "--group1", s(&d1), "--group2", s(&d2), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("subject_999.csv"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    // usage error
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(2));
    // missing input file
    let missing = tmp.path().join("nope.csv");
    let out = run(&["fit", "--x", s(&missing), "--y", s(&missing), "--dims", "2,2,1,1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    // invalid config
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "p1 = 3\np2 = 3\nq1 = 2\nq2 = 2\nn_grid = [10]\nmethods = [\"kpf\"]\nreplicates = 0\nseed_base = 1\n")
        .unwrap();
    assert_eq!(run(&["simulate", "--config", s(&cfg)]).status.code(), Some(4));
    std::fs::write(&cfg, "p1 = 3\nwidth = 2\n").unwrap();
    assert_eq!(run(&["simulate", "--config", s(&cfg)]).status.code(), Some(4));
    // rank-deficient design: fewer samples than predictors
    let x = tmp.path().join("x.csv");
    let y = tmp.path().join("y.csv");
    write_matrix(&x, &Mat::from_fn(3, 4, |i, j| (i + j) as f64)).unwrap();
    write_matrix(&y, &Mat::from_fn(3, 4, |i, j| (i * j) as f64)).unwrap();
    let out = run(&["fit", "--x", s(&x), "--y", s(&y), "--dims", "2,2,2,2", "--out", s(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_reports() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    let stdout = ok(&[
        "--threads", "2", "simulate", "--p1", "4", "--p2", "4", "--q1", "2", "--q2", "2", "--n-grid", "40,80",
        "--methods", "kpf,mle", "--replicates", "3", "--seed-base", "5", "--spectrum", "true", "--output", s(&out),
    ]);
    assert!(!stdout.stdout.is_empty());
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("method,n,replicate,rel_error,seed"));
    let rows = read_csv_records(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 3);
    let seeds: Vec<u64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(seeds.contains(&(5 ^ 2)));
    assert!(out.join("report.json").exists());
    assert!(out.join("spectrum.csv").exists());
}
