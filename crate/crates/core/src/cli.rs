//! Command-line front end.
//!
//! Subcommands: `simulate`, `fit`, `predict`, `spectrum`, `twogroup`.
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 config error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{two_group_analysis, GroupData, TwoGroupOptions};
use crate::error::{Error, Result};
use crate::estimator::{
    factorize_nu, kro_pro_fac, predict, variant_low_rank_response, variant_reduced_rank_ols, FitOptions,
    FitReport, KroneckerCoefficients, KroneckerTerm,
};
use crate::experiment::{dump_replicate, run_simulation, ExperimentConfig};
use crate::io::{
    detect_format, fmt_f64, normal_equations_from_files, read_matrix, read_stack, write_matrix, write_stack,
    MatrixFormat,
};
use crate::metrics::cumulative_fractions;
use crate::mle::{mle_fit, MleOptions};
use crate::simgen::Dataset;
use crate::tensor::{rearrange, Dims, Mat};

#[derive(Debug, Parser)]
#[command(name = "kroprofac", version, about = "Kronecker product factorization for matrix-response regression")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "KROPROFAC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a Monte Carlo benchmark described by a config file and/or flags.
    Simulate(SimulateArgs),
    /// Fit one dataset given as design and response files.
    Fit(FitArgs),
    /// Apply fitted factors to new predictors.
    Predict(PredictArgs),
    /// Cumulative singular value curves of a coefficient and its rearrangement.
    Spectrum(SpectrumArgs),
    /// Two-group channel-effect analysis.
    Twogroup(TwoGroupArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML config; every key can also be given as a flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub p1: Option<usize>,
    #[arg(long)]
    pub p2: Option<usize>,
    #[arg(long)]
    pub q1: Option<usize>,
    #[arg(long)]
    pub q2: Option<usize>,
    #[arg(long)]
    pub d_true: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub bandwidth: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub structure_seed: Option<u64>,
    /// Comma separated, e.g. `kpf,kpf_alpha(2),rdu_rank(2),mle`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    /// Output directory for `results.csv` and `report.json`.
    #[arg(long)]
    pub output: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_bar: Option<usize>,
    #[arg(long)]
    pub spectrum: Option<bool>,
    #[arg(long)]
    pub mle_max_iter: Option<usize>,
    #[arg(long)]
    pub mle_tol: Option<f64>,
    /// Write replicate 0 (first grid size) as `x.kmx`, `y.kmx` into this directory.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMethod {
    Kpf,
    KpfAlpha,
    RduRank,
    Mle,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Design, `n x q1q2`, row i = vec(X_i).
    #[arg(long)]
    pub x: PathBuf,
    /// Responses, `n x p1p2`, row i = vec(Y_i).
    #[arg(long)]
    pub y: PathBuf,
    /// `p1,p2,q1,q2`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub dbar: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long, value_enum, default_value = "kpf")]
    pub method: FitMethod,
    #[arg(long, default_value = "100")]
    pub max_iter: usize,
    #[arg(long, default_value = "1e-6")]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub coef: PathBuf,
    /// One `q1 x q2` predictor, or a KST1 stack of them.
    #[arg(long)]
    pub x: PathBuf,
    /// Output matrix (or stack, for stacked input).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    /// Coefficient matrix, `p1p2 x q1q2`.
    #[arg(long)]
    pub m: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TwoGroupArgs {
    /// Directory of sample matrices (CSV or KMX, sorted by name) or a KST1 stack.
    #[arg(long)]
    pub group1: PathBuf,
    #[arg(long)]
    pub group2: PathBuf,
    /// Expected sample shape `p1,p2`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long)]
    pub dbar: Option<usize>,
    #[arg(long, default_value = "0.05")]
    pub alpha_level: f64,
    #[arg(long)]
    pub ols_baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(cli: &Cli) -> usize {
    cli.threads
        .filter(|t| *t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, thread_count(cli)),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Twogroup(a) => cmd_twogroup(a),
    }
}

fn parse_dims(v: &[usize]) -> Result<Dims> {
    match v {
        [p1, p2, q1, q2] => Dims::new(*p1, *p2, *q1, *q2),
        _ => Err(Error::arg("--dims expects p1,p2,q1,q2")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Merge the config file with flag overrides.
pub fn build_config(a: &SimulateArgs) -> Result<ExperimentConfig> {
    let mut table = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let mut set = |key: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(key.to_string(), v);
        }
    };
    let int = |x: Option<usize>| x.map(|v| toml::Value::Integer(v as i64));
    let uint = |x: Option<u64>| {
        x.map(|v| {
            i64::try_from(v)
                .map(toml::Value::Integer)
                .map_err(|_| Error::Config(format!("{v} exceeds the TOML integer range")))
        })
        .transpose()
    };
    set("p1", int(a.p1));
    set("p2", int(a.p2));
    set("q1", int(a.q1));
    set("q2", int(a.q2));
    set("d_true", int(a.d_true));
    set(
        "n_grid",
        a.n_grid.as_ref().map(|g| toml::Value::Array(g.iter().map(|n| toml::Value::Integer(*n as i64)).collect())),
    );
    set("noise", a.noise.clone().map(toml::Value::String));
    set("bandwidth", int(a.bandwidth));
    set("rho", a.rho.map(toml::Value::Float));
    set("structure_seed", uint(a.structure_seed)?);
    set(
        "methods",
        a.methods.as_ref().map(|m| toml::Value::Array(m.iter().cloned().map(toml::Value::String).collect())),
    );
    set("replicates", int(a.replicates));
    set("seed_base", uint(a.seed_base)?);
    set("output", a.output.clone().map(toml::Value::String));
    set("d", int(a.d));
    set("d_bar", int(a.d_bar));
    set("spectrum", a.spectrum.map(toml::Value::Boolean));
    set("mle_max_iter", int(a.mle_max_iter));
    set("mle_tol", a.mle_tol.map(toml::Value::Float));
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(a: &SimulateArgs, threads: usize) -> Result<()> {
    let cfg = build_config(a)?;
    if let Some(dir) = &a.dump {
        dump_replicate(&cfg, cfg.n_grid[0], dir)?;
    }
    let report = run_simulation(&cfg, threads)?;
    let out = PathBuf::from(cfg.output.clone().unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&out)?;
    write_text(&out.join("results.csv"), &report.to_csv())?;
    write_text(&out.join("report.json"), &(report.to_json() + "\n"))?;
    if cfg.spectrum {
        write_text(&out.join("spectrum.csv"), &report.spectrum_csv())?;
    }
    print!("{}", report.summary_text());
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitSummary<'a> {
    method: &'a str,
    dims: Dims,
    n: usize,
    d: usize,
    d_selected: usize,
    d_bar: usize,
    singular_values: &'a [f64],
    selection_ratios: &'a [f64],
    randomized: bool,
}

fn write_factors(dir: &Path, coeffs: &KroneckerCoefficients) -> Result<()> {
    for (k, t) in coeffs.terms.iter().enumerate() {
        write_matrix(&dir.join(format!("beta1_{}.csv", k + 1)), &t.beta1)?;
        write_matrix(&dir.join(format!("beta2_{}.csv", k + 1)), &t.beta2)?;
    }
    Ok(())
}

fn load_dataset(a: &FitArgs, dims: Dims) -> Result<Dataset> {
    Dataset::new(dims, read_matrix(&a.x)?, read_matrix(&a.y)?)
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    std::fs::create_dir_all(&a.out)?;
    let opts = FitOptions { d_bar: a.dbar, d_fixed: a.d, ..Default::default() };
    let (report, n, method): (FitReport, usize, &str) = match a.method {
        FitMethod::Kpf | FitMethod::RduRank => {
            let ne = normal_equations_from_files(&a.x, &a.y)?;
            let q = ne.solve()?;
            if q.nrows() != dims.q() || q.ncols() != dims.p() {
                return Err(Error::dim(format!(
                    "files give q1q2 = {}, p1p2 = {} but --dims is {dims}",
                    q.nrows(),
                    q.ncols()
                )));
            }
            let nu_tilde = q.transpose();
            if a.method == FitMethod::Kpf {
                (factorize_nu(&nu_tilde, &dims, &opts)?, ne.samples(), "kpf")
            } else {
                let g = a.gamma.ok_or_else(|| Error::arg("--method rdu-rank needs --gamma"))?;
                let reduced = variant_reduced_rank_ols(&nu_tilde, g)?;
                (factorize_nu(&reduced, &dims, &opts)?, ne.samples(), "rdu_rank")
            }
        }
        FitMethod::KpfAlpha => {
            let alpha = a.alpha.ok_or_else(|| Error::arg("--method kpf-alpha needs --alpha"))?;
            let data = variant_low_rank_response(&load_dataset(a, dims)?, alpha)?;
            (kro_pro_fac(&data, &opts)?, data.n(), "kpf_alpha")
        }
        FitMethod::Mle => {
            let data = load_dataset(a, dims)?;
            let state = mle_fit(&data, None, &MleOptions { max_iter: a.max_iter, tol: a.tol, fix_covariance: false })?;
            write_matrix(&a.out.join("beta1_1.csv"), &state.beta1)?;
            write_matrix(&a.out.join("beta2_1.csv"), &state.beta2)?;
            write_matrix(&a.out.join("sigma1.csv"), &state.sigma1)?;
            write_matrix(&a.out.join("sigma2.csv"), &state.sigma2)?;
            write_json(&a.out.join("mle_state.json"), &state)?;
            println!(
                "mle: {} iterations, converged = {}, loglik = {}",
                state.iterations,
                state.converged,
                fmt_f64(state.loglik)
            );
            return Ok(());
        }
    };
    write_factors(&a.out, &report.coefficients)?;
    let mut spectrum = String::from("k,sigma\n");
    for (k, s) in report.singular_values_all.iter().enumerate() {
        spectrum.push_str(&format!("{},{}\n", k + 1, fmt_f64(*s)));
    }
    write_text(&a.out.join("spectrum.csv"), &spectrum)?;
    write_json(&a.out.join("fit_report.json"), &report)?;
    let summary = FitSummary {
        method,
        dims,
        n,
        d: report.d(),
        d_selected: report.d_selected,
        d_bar: report.d_bar,
        singular_values: &report.singular_values_all,
        selection_ratios: &report.selection_ratios,
        randomized: report.randomized,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{method}: d = {} (ratio criterion picked {}), n = {n}", report.d(), report.d_selected);
    Ok(())
}

/// Factors `beta1_k.*` / `beta2_k.*` from a fit directory.
pub fn load_factors(dir: &Path) -> Result<KroneckerCoefficients> {
    let mut terms = Vec::new();
    for k in 1.. {
        let b1 = dir.join(format!("beta1_{k}.csv"));
        let b2 = dir.join(format!("beta2_{k}.csv"));
        if !b1.exists() || !b2.exists() {
            break;
        }
        terms.push(KroneckerTerm { beta1: read_matrix(&b1)?, beta2: read_matrix(&b2)? });
    }
    let Some(first) = terms.first() else {
        return Err(Error::arg(format!("{}: no beta1_1.csv / beta2_1.csv found", dir.display())));
    };
    let dims = Dims::new(first.beta1.nrows(), first.beta2.nrows(), first.beta1.ncols(), first.beta2.ncols())?;
    for (k, t) in terms.iter().enumerate() {
        if t.beta1.shape() != (dims.p1, dims.q1) || t.beta2.shape() != (dims.p2, dims.q2) {
            return Err(Error::dim(format!("{}: term {} has inconsistent shapes", dir.display(), k + 1)));
        }
    }
    let sigma = terms.iter().map(|t| t.beta1.norm() * t.beta2.norm()).collect();
    Ok(KroneckerCoefficients { dims, terms, sigma })
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let coeffs = load_factors(&a.coef)?;
    if detect_format(&a.x)? == MatrixFormat::Kst {
        let xs = read_stack(&a.x)?;
        let ys = xs.iter().map(|x| predict(&coeffs, x)).collect::<Result<Vec<Mat>>>()?;
        write_stack(&a.out, &ys)
    } else {
        write_matrix(&a.out, &predict(&coeffs, &read_matrix(&a.x)?)?)
    }
}

/// CSV rows `k, f_k(M), f_k(R(M))` for `k = 1..=k_max`.
pub fn spectrum_csv(m: &Mat, dims: &Dims, k_max: Option<usize>) -> Result<String> {
    if m.shape() != (dims.p(), dims.q()) {
        return Err(Error::dim(format!(
            "matrix is {}x{} but dims {dims} need {}x{}",
            m.nrows(),
            m.ncols(),
            dims.p(),
            dims.q()
        )));
    }
    let raw = cumulative_fractions(m)?;
    let re = cumulative_fractions(&rearrange(m, dims)?)?;
    let limit = raw.len().min(re.len());
    let k_max = k_max.unwrap_or(limit);
    if k_max == 0 || k_max > limit {
        return Err(Error::arg(format!("k_max = {k_max} must lie in 1..={limit}")));
    }
    let mut out = String::from("k,f_k_raw,f_k_rearranged\n");
    for k in 0..k_max {
        out.push_str(&format!("{},{},{}\n", k + 1, fmt_f64(raw[k]), fmt_f64(re[k])));
    }
    Ok(out)
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    let csv = spectrum_csv(&read_matrix(&a.m)?, &dims, a.k_max)?;
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
            Ok(())
        }
    }
}

/// Samples from a directory (files sorted by name) or a KST1 stack file.
pub fn load_group(path: &Path, expected: Option<(usize, usize)>) -> Result<GroupData> {
    let label = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut samples: Vec<(String, Mat)> = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file())
            .filter(|p| !p.file_name().map(|n| n.to_string_lossy().starts_with('.')).unwrap_or(true))
            .collect();
        files.sort();
        for f in files {
            if detect_format(&f)? == MatrixFormat::Kst {
                for (i, m) in read_stack(&f)?.into_iter().enumerate() {
                    samples.push((format!("{}[{i}]", f.display()), m));
                }
            } else {
                samples.push((f.display().to_string(), read_matrix(&f)?));
            }
        }
    } else {
        for (i, m) in read_stack(path)?.into_iter().enumerate() {
            samples.push((format!("{}[{i}]", path.display()), m));
        }
    }
    if samples.len() < 2 {
        return Err(Error::arg(format!("{}: need at least 2 samples, found {}", path.display(), samples.len())));
    }
    let shape = expected.unwrap_or_else(|| samples[0].1.shape());
    if let Some((name, m)) = samples.iter().find(|(_, m)| m.shape() != shape) {
        return Err(Error::dim(format!(
            "{name} is {}x{}, expected {}x{}",
            m.nrows(),
            m.ncols(),
            shape.0,
            shape.1
        )));
    }
    GroupData::new(label, samples.into_iter().map(|(_, m)| m).collect())
}

fn cmd_twogroup(a: &TwoGroupArgs) -> Result<()> {
    let expected = match a.dims.as_deref() {
        Some([p1, p2]) => Some((*p1, *p2)),
        Some(_) => return Err(Error::arg("--dims expects p1,p2")),
        None => None,
    };
    let g1 = load_group(&a.group1, expected)?;
    let g2 = load_group(&a.group2, expected.or(Some(g1.shape())))?;
    let opts = TwoGroupOptions {
        d_bar: a.dbar,
        d1: a.d1,
        d2: a.d2,
        alpha: a.alpha_level,
        ols_baseline: a.ols_baseline,
    };
    let res = two_group_analysis(&g1, &g2, &opts)?;
    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from("channel,theta_hat,t,p,p_BY,reject\n");
    for c in 0..res.theta_hat.len() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c + 1,
            fmt_f64(res.theta_hat[c]),
            fmt_f64(res.t_stats[c]),
            fmt_f64(res.p_values[c]),
            fmt_f64(res.p_adjusted[c]),
            res.rejected[c]
        ));
    }
    write_text(&a.out.join("channels.csv"), &csv)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        groups: (&'a str, &'a str),
        subjects: (usize, usize),
        rejections: usize,
        neg_log10_p_adjusted: Vec<f64>,
        result: &'a crate::analysis::ChannelTestResult,
    }
    write_json(
        &a.out.join("summary.json"),
        &Summary {
            groups: (&g1.label, &g2.label),
            subjects: (g1.len(), g2.len()),
            rejections: res.rejections(),
            neg_log10_p_adjusted: res.neg_log10_adjusted(),
            result: &res,
        },
    )?;
    println!(
        "{} of {} channels rejected at alpha = {} (d = {}, {}){}",
        res.rejections(),
        res.theta_hat.len(),
        res.alpha,
        res.d_selected.0,
        res.d_selected.1,
        if res.ols_baseline { " using group means" } else { "" }
    );
    Ok(())
}
