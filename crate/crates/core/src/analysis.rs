//! Two-group comparison of matrix-valued samples.
//!
//! Each group mean is fitted with the intercept-only Kronecker model, the
//! per-channel effect is the column mean of the difference of the fitted
//! means, and channels are tested with Welch t-tests followed by the
//! Benjamini–Yekutieli adjustment.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimator::{factorize_nu, FitOptions, FitReport};
use crate::tensor::{vec, vec_inv, Dims, Mat};

/// Samples of one group, `p1 x p2` each (rows are time points, columns are
/// channels).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    pub label: String,
    pub samples: Vec<Mat>,
}

impl GroupData {
    pub fn new(label: impl Into<String>, samples: Vec<Mat>) -> Result<Self> {
        let label = label.into();
        let Some(first) = samples.first() else {
            return Err(Error::arg(format!("group '{label}' has no samples")));
        };
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::dim(format!("group '{label}' has empty samples")));
        }
        if let Some(i) = samples.iter().position(|s| s.shape() != shape) {
            return Err(Error::dim(format!(
                "group '{label}': sample {i} is {}x{}, expected {}x{}",
                samples[i].nrows(),
                samples[i].ncols(),
                shape.0,
                shape.1
            )));
        }
        Ok(GroupData { label, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(p1, p2)`.
    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].shape()
    }

    /// Intercept-only model dimensions, `q1 = q2 = 1`.
    pub fn dims(&self) -> Dims {
        let (p1, p2) = self.shape();
        Dims { p1, p2, q1: 1, q2: 1 }
    }

    pub fn mean(&self) -> Mat {
        let (p1, p2) = self.shape();
        let mut acc = Mat::zeros(p1, p2);
        for s in &self.samples {
            acc += s;
        }
        acc / self.len() as f64
    }

    /// Per-subject channel scores: row `i`, column `c` is the mean of column
    /// `c` of sample `i`.
    pub fn channel_scores(&self) -> Mat {
        let (p1, p2) = self.shape();
        Mat::from_fn(self.len(), p2, |i, c| self.samples[i].column(c).sum() / p1 as f64)
    }
}

/// Intercept-only fit: `ν̃ = vec(Ȳ)`, rearranged and truncated.
pub fn fit_group_mean(group: &GroupData, d_bar: Option<usize>, d_fixed: Option<usize>) -> Result<FitReport> {
    if group.is_empty() {
        return Err(Error::arg(format!("group '{}' has no samples", group.label)));
    }
    let dims = group.dims();
    let nu_tilde = Mat::from_column_slice(dims.p(), 1, &vec(&group.mean()));
    let opts = FitOptions { d_bar, d_fixed, ..Default::default() };
    factorize_nu(&nu_tilde, &dims, &opts)
}

/// Column means of `vec^{-1}(ν̂1 - ν̂2, p1, p2)`.
pub fn channel_effects(fit1: &FitReport, fit2: &FitReport) -> Result<Vec<f64>> {
    let (d1, d2) = (fit1.coefficients.dims, fit2.coefficients.dims);
    if d1 != d2 {
        return Err(Error::arg(format!("fits have different dims: {d1} vs {d2}")));
    }
    effects_from_difference(&(fit1.nu_hat() - fit2.nu_hat()), d1.p1, d1.p2)
}

fn effects_from_difference(diff: &Mat, p1: usize, p2: usize) -> Result<Vec<f64>> {
    let m = vec_inv(diff.as_slice(), p1, p2)?;
    Ok(m.column_iter().map(|c| c.sum() / p1 as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestOutcome {
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Welch–Satterthwaite degrees of freedom (NaN for degenerate channels).
    pub df: Vec<f64>,
    /// Channel had zero score variance in both groups.
    pub degenerate: Vec<bool>,
}

fn sample_variance(col: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = col.clone().count() as f64;
    let mean = col.clone().sum::<f64>() / n;
    col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Welch t-tests of `theta[c]` with dispersion taken from per-subject scores
/// (`scores_j` is `n_j x m`).
pub fn welch_t_tests(theta: &[f64], scores1: &Mat, scores2: &Mat) -> Result<TTestOutcome> {
    let m = theta.len();
    if scores1.ncols() != m || scores2.ncols() != m {
        return Err(Error::arg(format!(
            "{m} effects but score matrices have {} and {} columns",
            scores1.ncols(),
            scores2.ncols()
        )));
    }
    let (n1, n2) = (scores1.nrows(), scores2.nrows());
    if n1 < 2 || n2 < 2 {
        return Err(Error::arg(format!("t-tests need at least 2 subjects per group, got {n1} and {n2}")));
    }
    let mut out = TTestOutcome {
        t_stats: Vec::with_capacity(m),
        p_values: Vec::with_capacity(m),
        df: Vec::with_capacity(m),
        degenerate: Vec::with_capacity(m),
    };
    for c in 0..m {
        let a = sample_variance(scores1.column(c).iter().copied()) / n1 as f64;
        let b = sample_variance(scores2.column(c).iter().copied()) / n2 as f64;
        let se = (a + b).sqrt();
        if se == 0.0 {
            let nonzero = theta[c] != 0.0;
            out.t_stats.push(if nonzero { theta[c].signum() * f64::INFINITY } else { 0.0 });
            out.p_values.push(if nonzero { 0.0 } else { 1.0 });
            out.df.push(f64::NAN);
            out.degenerate.push(true);
            continue;
        }
        let df = (a + b).powi(2) / (a * a / (n1 - 1) as f64 + b * b / (n2 - 1) as f64);
        let t = theta[c] / se;
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
        out.t_stats.push(t);
        out.p_values.push((2.0 * dist.sf(t.abs())).min(1.0));
        out.df.push(df);
        out.degenerate.push(false);
    }
    Ok(out)
}

/// Per-channel Welch t-tests of `theta_hat` using per-subject channel scores.
pub fn channel_t_tests(theta_hat: &[f64], group1: &GroupData, group2: &GroupData) -> Result<TTestOutcome> {
    if group1.shape() != group2.shape() {
        return Err(Error::arg(format!(
            "groups '{}' and '{}' have different sample shapes",
            group1.label, group2.label
        )));
    }
    welch_t_tests(theta_hat, &group1.channel_scores(), &group2.channel_scores())
}

/// `c(m) = Σ_{j=1..m} 1/j`.
pub fn by_constant(m: usize) -> f64 {
    (1..=m).map(|j| 1.0 / j as f64).sum()
}

/// Benjamini–Yekutieli adjusted p-values, returned in input order.
pub fn by_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::arg(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let cm = by_constant(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &idx) in order.iter().enumerate().rev() {
        let q = (cm * m as f64 / (rank0 + 1) as f64 * p_values[idx]).min(1.0);
        running = running.min(q);
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoGroupOptions {
    pub d_bar: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub alpha: f64,
    /// Use the raw group means instead of the Kronecker fits for the effect.
    pub ols_baseline: bool,
}

impl Default for TwoGroupOptions {
    fn default() -> Self {
        TwoGroupOptions { d_bar: None, d1: None, d2: None, alpha: 0.05, ols_baseline: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTestResult {
    pub theta_hat: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub p_adjusted: Vec<f64>,
    pub df: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub rejected: Vec<bool>,
    pub alpha: f64,
    /// Number of Kronecker terms used for each group mean.
    pub d_selected: (usize, usize),
    pub ols_baseline: bool,
}

impl ChannelTestResult {
    pub fn rejections(&self) -> usize {
        self.rejected.iter().filter(|r| **r).count()
    }

    pub fn neg_log10_adjusted(&self) -> Vec<f64> {
        self.p_adjusted.iter().map(|p| -p.log10()).collect()
    }
}

/// Full pipeline: group fits, channel effects, t-tests, BY adjustment.
pub fn two_group_analysis(
    group1: &GroupData,
    group2: &GroupData,
    opts: &TwoGroupOptions,
) -> Result<ChannelTestResult> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::arg(format!("alpha = {} must lie in (0, 1)", opts.alpha)));
    }
    if group1.shape() != group2.shape() {
        return Err(Error::dim(format!(
            "groups '{}' ({:?}) and '{}' ({:?}) have different sample shapes",
            group1.label,
            group1.shape(),
            group2.label,
            group2.shape()
        )));
    }
    let fit1 = fit_group_mean(group1, opts.d_bar, opts.d1)?;
    let fit2 = fit_group_mean(group2, opts.d_bar, opts.d2)?;
    let (p1, p2) = group1.shape();
    let theta_hat = if opts.ols_baseline {
        effects_from_difference(&(group1.mean() - group2.mean()), p1, p2)?
    } else {
        channel_effects(&fit1, &fit2)?
    };
    let tests = channel_t_tests(&theta_hat, group1, group2)?;
    let p_adjusted = by_adjust(&tests.p_values)?;
    let rejected = p_adjusted.iter().map(|p| *p <= opts.alpha).collect();
    Ok(ChannelTestResult {
        theta_hat,
        t_stats: tests.t_stats,
        p_values: tests.p_values,
        p_adjusted,
        df: tests.df,
        degenerate: tests.degenerate,
        rejected,
        alpha: opts.alpha,
        d_selected: (fit1.d(), fit2.d()),
        ols_baseline: opts.ols_baseline,
    })
}
