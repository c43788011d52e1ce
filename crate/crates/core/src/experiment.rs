//! Monte Carlo benchmark driver.
//!
//! Coefficients are drawn once from `seed_base`; replicate `r` draws a fresh
//! design and noise from `seed_base ^ r`. Every (n, replicate) cell is an
//! independent task, and results are merged in grid order, so outputs do not
//! depend on the worker count.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    factorize_nu, truncate_response, variant_reduced_rank_ols, FitOptions, KroneckerCoefficients,
};
use crate::io::{fmt_f64, KmxWriter};
use crate::linalg::NormalEquations;
use crate::metrics::{cumulative_singular_fraction, mean, median, relative_error, standard_error};
use crate::mle::{mle_fit, MleOptions};
use crate::simgen::{gen_coefficients, gen_dataset_from, DatasetSeeds, DatasetStream, NoiseModelSpec};
use crate::tensor::{rearrange, Dims, Mat};

pub const CSV_HEADER: &str = "method,n,replicate,rel_error,seed";

/// Estimator variants compared in a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Kpf,
    /// Truncate every response to rank `alpha` before the OLS step.
    KpfAlpha(usize),
    /// Truncate the OLS coefficient to matrix rank `gamma` before rearranging.
    RduRank(usize),
    Mle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Kpf => write!(f, "kpf"),
            Method::KpfAlpha(a) => write!(f, "kpf_alpha({a})"),
            Method::RduRank(g) => write!(f, "rdu_rank({g})"),
            Method::Mle => write!(f, "mle"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let arg = |prefix: &str| -> Option<Result<usize>> {
            let rest = s.strip_prefix(prefix)?;
            let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|v| *v > 0)
                    .ok_or_else(|| Error::Config(format!("bad rank in method '{s}'"))),
            )
        };
        match s {
            "kpf" => return Ok(Method::Kpf),
            "mle" => return Ok(Method::Mle),
            _ => {}
        }
        if let Some(a) = arg("kpf_alpha") {
            return a.map(Method::KpfAlpha);
        }
        if let Some(g) = arg("rdu_rank") {
            return g.map(Method::RduRank);
        }
        Err(Error::Config(format!(
            "unknown method '{s}' (expected kpf, kpf_alpha(a), rdu_rank(g) or mle)"
        )))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

fn default_d_true() -> usize {
    1
}

fn default_noise() -> String {
    "identity".into()
}

/// Flat experiment description; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub p1: usize,
    pub p2: usize,
    pub q1: usize,
    pub q2: usize,
    #[serde(default = "default_d_true")]
    pub d_true: usize,
    pub n_grid: Vec<usize>,
    /// `identity`, `banded`, `ar1`, `t5` or `none`.
    #[serde(default = "default_noise")]
    pub noise: String,
    #[serde(default)]
    pub bandwidth: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub structure_seed: Option<u64>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub seed_base: u64,
    #[serde(default)]
    pub output: Option<String>,
    /// Fixed number of Kronecker terms; the ratio criterion decides when unset.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub d_bar: Option<usize>,
    /// Also record `f_1` of `ν̃` and of `R(ν̃)` per replicate.
    #[serde(default)]
    pub spectrum: bool,
    #[serde(default)]
    pub mle_max_iter: Option<usize>,
    #[serde(default)]
    pub mle_tol: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.p1, self.p2, self.q1, self.q2).map_err(|e| Error::Config(e.to_string()))
    }

    /// `None` means noiseless responses.
    pub fn noise_spec(&self) -> Result<Option<NoiseModelSpec>> {
        let seed = self.structure_seed.unwrap_or(0);
        let spec = match self.noise.as_str() {
            "none" => return Ok(None),
            "identity" => NoiseModelSpec::identity(),
            "banded" => {
                let b = self
                    .bandwidth
                    .ok_or_else(|| Error::Config("noise = \"banded\" needs bandwidth".into()))?;
                NoiseModelSpec::banded(b, seed)
            }
            "ar1" => {
                let rho = self.rho.ok_or_else(|| Error::Config("noise = \"ar1\" needs rho".into()))?;
                NoiseModelSpec::ar1(rho)
            }
            "t5" => NoiseModelSpec::heavy_tailed(),
            other => {
                return Err(Error::Config(format!(
                    "unknown noise '{other}' (expected identity, banded, ar1, t5 or none)"
                )))
            }
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Some(spec))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::Config("n_grid must be a nonempty list of positive sizes".into()));
        }
        let max_rank = dims.max_kron_rank();
        if self.d_true == 0 || self.d_true > max_rank {
            return Err(Error::Config(format!("d_true = {} must lie in 1..={max_rank}", self.d_true)));
        }
        if let Some(d) = self.d {
            if d == 0 || d > max_rank {
                return Err(Error::Config(format!("d = {d} must lie in 1..={max_rank}")));
            }
        }
        for m in &self.methods {
            match *m {
                Method::KpfAlpha(a) if a > dims.p1.min(dims.p2) => {
                    return Err(Error::Config(format!("{m}: alpha exceeds min(p1, p2)")))
                }
                Method::RduRank(g) if g > dims.p().min(dims.q()) => {
                    return Err(Error::Config(format!("{m}: gamma exceeds min(p1p2, q1q2)")))
                }
                _ => {}
            }
        }
        self.noise_spec()?;
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions { d_bar: self.d_bar, d_fixed: self.d, ..Default::default() }
    }

    fn mle_options(&self) -> MleOptions {
        let d = MleOptions::default();
        MleOptions {
            max_iter: self.mle_max_iter.unwrap_or(d.max_iter),
            tol: self.mle_tol.unwrap_or(d.tol),
            fix_covariance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub method: Method,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `None` when the fit failed; see `error`.
    pub rel_error: Option<f64>,
    pub error: Option<String>,
    /// Number of Kronecker terms in the fitted coefficient.
    pub d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub n: usize,
    pub replicate: usize,
    /// `f_1(R(ν̃))`.
    pub f1_rearranged: f64,
    /// `f_1(ν̃)`.
    pub f1_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub mean_rel_error: f64,
    pub se_rel_error: f64,
    pub median_rel_error: f64,
    pub mean_rel_error_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub n: usize,
    pub mean_f1_rearranged: f64,
    pub mean_f1_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
    pub threads: usize,
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicateRecord>,
    pub spectrum: Vec<SpectrumRecord>,
    pub spectrum_summary: Vec<SpectrumSummary>,
}

impl RunReport {
    pub fn cell(&self, method: Method, n: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && c.n == n)
    }

    pub fn errors(&self, method: Method, n: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.n == n)
            .filter_map(|r| r.rel_error)
            .collect()
    }

    /// Records as CSV with header `method,n,replicate,rel_error,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let err = r.rel_error.map(fmt_f64).unwrap_or_else(|| "NaN".into());
            out.push_str(&format!("{},{},{},{},{}\n", r.method, r.n, r.replicate, err, r.seed));
        }
        out
    }

    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("n,replicate,f1_rearranged,f1_raw\n");
        for s in &self.spectrum {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.n,
                s.replicate,
                fmt_f64(s.f1_rearranged),
                fmt_f64(s.f1_raw)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable table, errors in percent.
    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>14} {:>12} {:>9}\n",
            "method", "n", "mean err (%)", "se (%)", "failures"
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{:<14} {:>8} {:>14.4} {:>12.4} {:>9}\n",
                c.method.to_string(),
                c.n,
                c.mean_rel_error_percent,
                100.0 * c.se_rel_error,
                c.failures
            ));
        }
        for s in &self.spectrum_summary {
            out.push_str(&format!(
                "spectrum n={}: mean f1(R(nu)) = {:.4}, mean f1(nu) = {:.4}\n",
                s.n, s.mean_f1_rearranged, s.mean_f1_raw
            ));
        }
        out.push_str(&format!("wall clock: {:.2} s on {} threads\n", self.wall_clock_seconds, self.threads));
        out
    }
}

/// Replicate seed written to the CSV.
pub fn replicate_seed(seed_base: u64, replicate: usize) -> u64 {
    seed_base ^ replicate as u64
}

struct CellOutput {
    records: Vec<ReplicateRecord>,
    spectrum: Option<SpectrumRecord>,
}

fn alphas(methods: &[Method]) -> Vec<usize> {
    let mut a: Vec<usize> = methods
        .iter()
        .filter_map(|m| if let Method::KpfAlpha(a) = m { Some(*a) } else { None })
        .collect();
    a.sort_unstable();
    a.dedup();
    a
}

fn truncate_columns(yt: &Mat, dims: &Dims, alpha: usize) -> Result<Mat> {
    let mut out = yt.clone();
    for mut col in out.column_iter_mut() {
        let t = truncate_response(col.as_slice(), dims, alpha)?;
        col.copy_from_slice(&t);
    }
    Ok(out)
}

/// OLS coefficient from raw responses plus one per truncation rank.
fn streamed_nu_tildes(
    coeffs: &KroneckerCoefficients,
    n: usize,
    noise: Option<NoiseModelSpec>,
    seeds: DatasetSeeds,
    alphas: &[usize],
) -> Result<(Mat, Vec<Result<Mat>>)> {
    let dims = coeffs.dims;
    let mut stream = DatasetStream::new(coeffs, n, noise, seeds)?;
    let mut raw = NormalEquations::new(dims.q(), dims.p());
    let mut trunc: Vec<Result<NormalEquations>> =
        alphas.iter().map(|_| Ok(NormalEquations::new(dims.q(), dims.p()))).collect();
    while let Some((xc, yt)) = stream.next_chunk() {
        raw.add_chunk(&xc, &yt)?;
        for (ne, &a) in trunc.iter_mut().zip(alphas) {
            if let Ok(acc) = ne {
                let step = truncate_columns(&yt, &dims, a).and_then(|t| acc.add_chunk(&xc, &t));
                if let Err(e) = step {
                    *ne = Err(e);
                }
            }
        }
    }
    let nu = raw.solve()?.transpose();
    let per_alpha = trunc
        .into_iter()
        .map(|ne| ne.and_then(|ne| Ok(ne.solve()?.transpose())))
        .collect();
    Ok((nu, per_alpha))
}

fn run_cell(cfg: &ExperimentConfig, coeffs: &KroneckerCoefficients, n: usize, rep: usize) -> CellOutput {
    let seeds = DatasetSeeds::for_replicate(cfg.seed_base, rep as u64);
    let seed = replicate_seed(cfg.seed_base, rep);
    let noise = cfg.noise_spec().expect("validated");
    let dims = coeffs.dims;
    let nu = coeffs.nu();
    let opts = cfg.fit_options();
    let alpha_list = alphas(&cfg.methods);
    let record = |method: Method, fit: Result<(Mat, usize)>| {
        let fit = fit.and_then(|(nu_hat, d)| Ok((relative_error(&nu_hat, &nu)?, d)));
        match fit {
            Ok((e, d)) => ReplicateRecord {
                method,
                n,
                replicate: rep,
                seed,
                rel_error: Some(e),
                error: None,
                d: Some(d),
            },
            Err(e) => ReplicateRecord {
                method,
                n,
                replicate: rep,
                seed,
                rel_error: None,
                error: Some(e.to_string()),
                d: None,
            },
        }
    };

    let streamed = streamed_nu_tildes(coeffs, n, noise, seeds, &alpha_list);
    let (nu_tilde, per_alpha) = match streamed {
        Ok(v) => (Some(v.0), v.1),
        Err(e) => {
            let msg = e.to_string();
            let records = cfg
                .methods
                .iter()
                .map(|&m| record(m, Err(Error::Numeric(msg.clone()))))
                .collect();
            return CellOutput { records, spectrum: None };
        }
    };
    let nu_tilde = nu_tilde.expect("set above");
    let from_nu_tilde = |m: &Mat| factorize_nu(m, &dims, &opts).map(|f| (f.nu_hat(), f.d()));

    let mut records = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let fit = match method {
            Method::Kpf => from_nu_tilde(&nu_tilde),
            Method::KpfAlpha(a) => {
                let idx = alpha_list.iter().position(|x| *x == a).expect("collected");
                match &per_alpha[idx] {
                    Ok(m) => from_nu_tilde(m),
                    Err(e) => Err(Error::Numeric(e.to_string())),
                }
            }
            Method::RduRank(g) => variant_reduced_rank_ols(&nu_tilde, g).and_then(|m| from_nu_tilde(&m)),
            Method::Mle => gen_dataset_from(coeffs, n, noise, seeds)
                .and_then(|data| mle_fit(&data, None, &cfg.mle_options()))
                .map(|s| (s.nu_hat(), 1)),
        };
        records.push(record(method, fit));
    }

    let spectrum = if cfg.spectrum {
        rearrange(&nu_tilde, &dims).ok().and_then(|r| {
            Some(SpectrumRecord {
                n,
                replicate: rep,
                f1_rearranged: cumulative_singular_fraction(&r, 1).ok()?,
                f1_raw: cumulative_singular_fraction(&nu_tilde, 1).ok()?,
            })
        })
    } else {
        None
    };
    CellOutput { records, spectrum }
}

fn summarize(cfg: &ExperimentConfig, records: &[ReplicateRecord]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &n in &cfg.n_grid {
        for &method in &cfg.methods {
            let rs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.n == n && r.method == method).collect();
            let errs: Vec<f64> = rs.iter().filter_map(|r| r.rel_error).collect();
            let m = mean(&errs);
            cells.push(CellSummary {
                method,
                n,
                replicates: rs.len(),
                failures: rs.len() - errs.len(),
                mean_rel_error: m,
                se_rel_error: standard_error(&errs),
                median_rel_error: median(&errs),
                mean_rel_error_percent: 100.0 * m,
            });
        }
    }
    cells
}

/// Run the whole grid on a pool of `threads` workers.
pub fn run_simulation(cfg: &ExperimentConfig, threads: usize) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let dims = cfg.dims()?;
    let coeffs = gen_coefficients(dims, cfg.d_true, cfg.seed_base)?;
    let tasks: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::arg(format!("cannot build thread pool: {e}")))?;
    let outputs: Vec<CellOutput> =
        pool.install(|| tasks.par_iter().map(|&(n, r)| run_cell(cfg, &coeffs, n, r)).collect());

    let mut records = Vec::new();
    let mut spectrum = Vec::new();
    for out in outputs {
        records.extend(out.records);
        spectrum.extend(out.spectrum);
    }
    let spectrum_summary = if cfg.spectrum {
        cfg.n_grid
            .iter()
            .map(|&n| {
                let rows: Vec<&SpectrumRecord> = spectrum.iter().filter(|s| s.n == n).collect();
                SpectrumSummary {
                    n,
                    mean_f1_rearranged: mean(&rows.iter().map(|s| s.f1_rearranged).collect::<Vec<_>>()),
                    mean_f1_raw: mean(&rows.iter().map(|s| s.f1_raw).collect::<Vec<_>>()),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        threads: threads.max(1),
        cells: summarize(cfg, &records),
        records,
        spectrum,
        spectrum_summary,
    })
}

/// Write replicate 0 at sample size `n` as `x.kmx` / `y.kmx` (one row per
/// sample) plus the true factors, streaming rows straight to disk.
pub fn dump_replicate(cfg: &ExperimentConfig, n: usize, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let dims = cfg.dims()?;
    let coeffs = gen_coefficients(dims, cfg.d_true, cfg.seed_base)?;
    let seeds = DatasetSeeds::for_replicate(cfg.seed_base, 0);
    let mut stream = DatasetStream::new(&coeffs, n, cfg.noise_spec()?, seeds)?;
    let mut xw = KmxWriter::create(&dir.join("x.kmx"), n, dims.q())?;
    let mut yw = KmxWriter::create(&dir.join("y.kmx"), n, dims.p())?;
    while let Some((xc, yt)) = stream.next_chunk() {
        xw.write_rows(&xc)?;
        yw.write_transposed(&yt)?;
    }
    xw.finish()?;
    yw.finish()?;
    for (k, t) in coeffs.terms.iter().enumerate() {
        crate::io::write_matrix(&dir.join(format!("true_beta1_{}.csv", k + 1)), &t.beta1)?;
        crate::io::write_matrix(&dir.join(format!("true_beta2_{}.csv", k + 1)), &t.beta2)?;
    }
    Ok(())
}
