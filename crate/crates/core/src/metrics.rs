//! Evaluation metrics for fitted coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{true_spectrum, FitReport, KroneckerCoefficients};
use crate::linalg::{orthonormalize, sin_theta, svd_full};
use crate::tensor::{Dims, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rel_frobenius: f64,
    pub sin_theta_u: f64,
    pub sin_theta_v: f64,
    pub sigma_abs_errors: Vec<f64>,
    pub dims: Dims,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

/// `‖ν̂ - ν‖_F / ‖ν‖_F`.
pub fn relative_error(nu_hat: &Mat, nu: &Mat) -> Result<f64> {
    if nu_hat.shape() != nu.shape() {
        return Err(Error::dim(format!(
            "relative_error: shapes {:?} and {:?} differ",
            nu_hat.shape(),
            nu.shape()
        )));
    }
    let denom = nu.norm();
    if denom == 0.0 {
        return Err(Error::arg("relative_error: reference has zero norm"));
    }
    Ok((nu_hat - nu).norm() / denom)
}

/// `f_k(M)` for every `k = 1..=min(rows, cols)`.
pub fn cumulative_fractions(m: &Mat) -> Result<Vec<f64>> {
    let s = svd_full(m)?.s;
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Err(Error::arg("cumulative fraction of a zero matrix is undefined"));
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = s
        .iter()
        .map(|x| {
            acc += x;
            acc / total
        })
        .collect();
    // the last partial sum is the total itself
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

/// Share of the nuclear norm carried by the `k` leading singular values.
pub fn cumulative_singular_fraction(m: &Mat, k: usize) -> Result<f64> {
    let kmax = m.nrows().min(m.ncols());
    if k == 0 || k > kmax {
        return Err(Error::arg(format!("k = {k} must lie in 1..={kmax}")));
    }
    Ok(cumulative_fractions(m)?[k - 1])
}

fn vec_columns(mats: impl Iterator<Item = Mat>, rows: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(rows, d);
    for (k, m) in mats.enumerate() {
        out.column_mut(k).copy_from_slice(m.as_slice());
    }
    out
}

/// Subspace and singular-value errors of a fit against known coefficients.
pub fn subspace_errors(fit: &FitReport, truth: &KroneckerCoefficients) -> Result<ErrorReport> {
    let d = truth.d();
    if fit.d() != d {
        return Err(Error::arg(format!("fit has {} terms but truth has {d}", fit.d())));
    }
    if fit.coefficients.dims != truth.dims {
        return Err(Error::dim(format!(
            "fit dims {} differ from truth dims {}",
            fit.coefficients.dims, truth.dims
        )));
    }
    let dims = truth.dims;
    let (left, right) = dims.rearranged_shape();
    let u = orthonormalize(&vec_columns(truth.terms.iter().map(|t| t.beta2.clone()), left, d))?;
    let v = orthonormalize(&vec_columns(truth.terms.iter().map(|t| t.beta1.clone()), right, d))?;
    let sigma = true_spectrum(truth)?;
    let sigma_abs_errors = sigma
        .iter()
        .zip(&fit.coefficients.sigma)
        .map(|(s, h)| (s - h).abs())
        .collect();
    Ok(ErrorReport {
        rel_frobenius: relative_error(&fit.nu_hat(), &truth.nu())?,
        sin_theta_u: sin_theta(&u, &fit.u_hat)?,
        sin_theta_v: sin_theta(&v, &fit.v_hat)?,
        sigma_abs_errors,
        dims,
        n: None,
        seed: None,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`).
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
