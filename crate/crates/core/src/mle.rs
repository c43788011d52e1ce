//! Dual-Kronecker maximum likelihood baseline.
//!
//! Assumes `Y_i = beta1 X_i beta2^T + E_i` with matrix-normal noise,
//! `Cov(vec(E_i)) = Σ2 ⊗ Σ1`, and maximizes the likelihood by alternating
//! exact conditional updates of the row block `(beta1, Σ1)` and the column
//! block `(beta2, Σ2)`.

use nalgebra::{Cholesky, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{kro_pro_fac, FitOptions};
use crate::linalg::pseudo_inverse;
use crate::simgen::Dataset;
use crate::tensor::{kron, Mat};

/// Eigenvalue floor that triggers diagonal jitter on a covariance update.
pub const PD_FLOOR: f64 = 1e-10;
/// Relative slack allowed when checking that the likelihood never decreases.
pub const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleState {
    pub beta1: Mat,
    pub beta2: Mat,
    pub sigma1: Mat,
    pub sigma2: Mat,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after initialization and after every iteration.
    pub loglik_trace: Vec<f64>,
    /// Set when a conditional normal-equation matrix had to be pseudo-inverted.
    pub pinv_fallback: bool,
}

impl MleState {
    /// Initial state from given factors with identity covariances.
    pub fn from_factors(beta1: Mat, beta2: Mat) -> Self {
        let (p1, p2) = (beta1.nrows(), beta2.nrows());
        MleState {
            beta1,
            beta2,
            sigma1: Mat::identity(p1, p1),
            sigma2: Mat::identity(p2, p2),
            loglik: f64::NEG_INFINITY,
            iterations: 0,
            converged: false,
            loglik_trace: Vec::new(),
            pinv_fallback: false,
        }
    }

    pub fn nu_hat(&self) -> Mat {
        kron(&self.beta2, &self.beta1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Keep `Σ1 = I`, `Σ2 = I` (generalized least squares on the bilinear mean).
    pub fix_covariance: bool,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { max_iter: 100, tol: 1e-6, fix_covariance: false }
    }
}

fn cholesky(sigma: &Mat, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

fn check_shapes(state: &MleState, data: &Dataset) -> Result<()> {
    let d = data.dims;
    let ok = state.beta1.shape() == (d.p1, d.q1)
        && state.beta2.shape() == (d.p2, d.q2)
        && state.sigma1.shape() == (d.p1, d.p1)
        && state.sigma2.shape() == (d.p2, d.p2);
    if !ok {
        return Err(Error::dim(format!("MLE state does not match dataset dims {d}")));
    }
    Ok(())
}

struct Samples {
    x: Vec<Mat>,
    y: Vec<Mat>,
}

impl Samples {
    fn new(data: &Dataset) -> Self {
        Samples {
            x: (0..data.n()).map(|i| data.x_i(i)).collect(),
            y: (0..data.n()).map(|i| data.y_i(i)).collect(),
        }
    }

    fn residuals<'a>(&'a self, b1: &'a Mat, b2: &'a Mat) -> impl Iterator<Item = Mat> + 'a {
        let b2t = b2.transpose();
        self.y.iter().zip(&self.x).map(move |(y, x)| y - b1 * x * &b2t)
    }
}

fn loglik_samples(
    s: &Samples,
    b1: &Mat,
    b2: &Mat,
    sigma1: &Mat,
    sigma2: &Mat,
) -> Result<f64> {
    let c1 = cholesky(sigma1, "Σ1")?;
    let c2 = cholesky(sigma2, "Σ2")?;
    let (p1, p2) = (sigma1.nrows() as f64, sigma2.nrows() as f64);
    let n = s.y.len() as f64;
    let l1 = c1.l();
    let l2 = c2.l();
    let mut quad = 0.0;
    for r in s.residuals(b1, b2) {
        // ‖L1^{-1} R L2^{-T}‖_F^2 = tr(Σ2^{-1} R^T Σ1^{-1} R)
        let a = l1.solve_lower_triangular(&r).expect("nonsingular factor");
        let b = l2.solve_lower_triangular(&a.transpose()).expect("nonsingular factor");
        quad += b.norm_squared();
    }
    Ok(0.5 * (-n * p2 * log_det(&c1) - n * p1 * log_det(&c2) - quad))
}

/// Log-likelihood up to additive constants:
/// `½(-n p2 ln|Σ1| - n p1 ln|Σ2| - Σ_i tr{Σ2^{-1} R_i^T Σ1^{-1} R_i})`,
/// `R_i = Y_i - beta1 X_i beta2^T`.
pub fn log_likelihood(state: &MleState, data: &Dataset) -> Result<f64> {
    check_shapes(state, data)?;
    loglik_samples(&Samples::new(data), &state.beta1, &state.beta2, &state.sigma1, &state.sigma2)
}

/// Symmetrize and, when the smallest eigenvalue falls below [`PD_FLOOR`],
/// add `max(1e-8 tr(Σ)/p, PD_FLOOR)` to the diagonal.
fn stabilize(mut sigma: Mat) -> Mat {
    let t = sigma.transpose();
    sigma = (&sigma + t) * 0.5;
    let p = sigma.nrows();
    let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
    if min_eig < PD_FLOOR {
        let jitter = (1e-8 * sigma.trace() / p as f64).max(PD_FLOOR);
        for i in 0..p {
            sigma[(i, i)] += jitter;
        }
    }
    sigma
}

fn solve_right(c: &Mat, m: &Mat, fallback: &mut bool) -> Mat {
    // beta = C M^{-1} with M symmetric
    if let Some(ch) = Cholesky::new(m.clone()) {
        return ch.solve(&c.transpose()).transpose();
    }
    *fallback = true;
    let pinv = pseudo_inverse(m, 1e-12).unwrap_or_else(|_| Mat::zeros(m.nrows(), m.ncols()));
    c * pinv
}

fn inverse_spd(sigma: &Mat, what: &str) -> Result<Mat> {
    Ok(cholesky(sigma, what)?.inverse())
}

fn normalize(state: &mut MleState) {
    let (n1, n2) = (state.beta1.norm(), state.beta2.norm());
    if n1 > 0.0 && n2 > 0.0 {
        let c = (n2 / n1).sqrt();
        state.beta1 *= c;
        state.beta2 /= c;
    }
    if state.beta2[(0, 0)] < 0.0 {
        state.beta1.neg_mut();
        state.beta2.neg_mut();
    }
    let s = state.sigma2.norm();
    if s > 0.0 {
        state.sigma2 /= s;
        state.sigma1 *= s;
    }
}

/// Block-coordinate ascent on the dual-Kronecker likelihood.
///
/// Without `init`, starts from a rank-one KRO-PRO-FAC fit and identity
/// covariances.
pub fn mle_fit(data: &Dataset, init: Option<MleState>, opts: &MleOptions) -> Result<MleState> {
    let dims = data.dims;
    let mut state = match init {
        Some(s) => s,
        None => {
            let fit = kro_pro_fac(data, &FitOptions::with_d(1))?;
            let t = &fit.coefficients.terms[0];
            MleState::from_factors(t.beta1.clone(), t.beta2.clone())
        }
    };
    check_shapes(&state, data)?;
    if opts.fix_covariance {
        state.sigma1 = Mat::identity(dims.p1, dims.p1);
        state.sigma2 = Mat::identity(dims.p2, dims.p2);
    }
    let samples = Samples::new(data);
    let n = data.n() as f64;
    let (p1, p2) = (dims.p1 as f64, dims.p2 as f64);

    state.loglik = loglik_samples(&samples, &state.beta1, &state.beta2, &state.sigma1, &state.sigma2)?;
    state.loglik_trace = vec![state.loglik];
    state.iterations = 0;
    state.converged = false;

    for iter in 1..=opts.max_iter {
        // rows: beta1 then Σ1, with (beta2, Σ2) held fixed
        let s2inv = inverse_spd(&state.sigma2, "Σ2")?;
        let g = &s2inv * &state.beta2;
        let h = state.beta2.transpose() * &g;
        let mut c = Mat::zeros(dims.p1, dims.q1);
        let mut m = Mat::zeros(dims.q1, dims.q1);
        for (y, x) in samples.y.iter().zip(&samples.x) {
            c += y * &g * x.transpose();
            m += x * &h * x.transpose();
        }
        state.beta1 = solve_right(&c, &m, &mut state.pinv_fallback);
        if !opts.fix_covariance {
            let mut acc = Mat::zeros(dims.p1, dims.p1);
            for r in samples.residuals(&state.beta1, &state.beta2) {
                acc += &r * &s2inv * r.transpose();
            }
            state.sigma1 = stabilize(acc / (n * p2));
        }

        // columns: beta2 then Σ2, with (beta1, Σ1) held fixed
        let s1inv = inverse_spd(&state.sigma1, "Σ1")?;
        let g = &s1inv * &state.beta1;
        let h = state.beta1.transpose() * &g;
        let mut c = Mat::zeros(dims.p2, dims.q2);
        let mut m = Mat::zeros(dims.q2, dims.q2);
        for (y, x) in samples.y.iter().zip(&samples.x) {
            c += y.transpose() * &g * x;
            m += x.transpose() * &h * x;
        }
        state.beta2 = solve_right(&c, &m, &mut state.pinv_fallback);
        if !opts.fix_covariance {
            let mut acc = Mat::zeros(dims.p2, dims.p2);
            for r in samples.residuals(&state.beta1, &state.beta2) {
                acc += r.transpose() * &s1inv * &r;
            }
            state.sigma2 = stabilize(acc / (n * p1));
        }

        if !opts.fix_covariance {
            normalize(&mut state);
        }
        let prev = state.loglik;
        let ll = loglik_samples(&samples, &state.beta1, &state.beta2, &state.sigma1, &state.sigma2)?;
        if !ll.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood became {ll} at iteration {iter}")));
        }
        if ll < prev - MONOTONE_SLACK * prev.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "log-likelihood decreased from {prev} to {ll} at iteration {iter}"
            )));
        }
        state.loglik = ll;
        state.loglik_trace.push(ll);
        state.iterations = iter;
        if (ll - prev).abs() <= opts.tol * prev.abs().max(1e-300) {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::kro_pro_fac;
    use crate::metrics::relative_error;
    use crate::simgen::{gen_dataset, gen_design, DatasetSeeds, NoiseModelSpec};
    use crate::tensor::Dims;
    use approx::assert_relative_eq;

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - MONOTONE_SLACK * w[0].abs().max(1.0), "trace {trace:?}");
        }
    }

    #[test]
    fn loglik_of_perfect_fit_with_identity_covariance_is_zero() {
        let dims = Dims::new(3, 4, 2, 2).unwrap();
        let (data, truth) = gen_dataset(dims, 1, 10, None, DatasetSeeds::from_base(1)).unwrap();
        let t = &truth.terms[0];
        let state = MleState::from_factors(t.beta1.clone(), t.beta2.clone());
        assert!(log_likelihood(&state, &data).unwrap().abs() < 1e-20);
    }

    #[test]
    fn loglik_scalar_case() {
        // p1 = p2 = q1 = q2 = 1: -n ln(s1 s2)/2 - Σ r^2 / (2 s1 s2)
        let dims = Dims::new(1, 1, 1, 1).unwrap();
        let x = Mat::from_column_slice(4, 1, &[1.0, -0.5, 2.0, 0.3]);
        let y = Mat::from_column_slice(4, 1, &[2.1, -0.7, 4.4, 0.2]);
        let data = Dataset::new(dims, x.clone(), y.clone()).unwrap();
        let (b1, b2, s1, s2) = (1.5, 1.2, 0.7, 1.9);
        let mut state = MleState::from_factors(Mat::from_element(1, 1, b1), Mat::from_element(1, 1, b2));
        state.sigma1 = Mat::from_element(1, 1, s1);
        state.sigma2 = Mat::from_element(1, 1, s2);
        let rss: f64 = (0..4).map(|i| (y[i] - b1 * b2 * x[i]).powi(2)).sum();
        let oracle = -4.0 * (s1 * s2).ln() / 2.0 - rss / (2.0 * s1 * s2);
        assert_relative_eq!(log_likelihood(&state, &data).unwrap(), oracle, max_relative = 1e-13);
    }

    #[test]
    fn loglik_is_invariant_to_covariance_rescaling() {
        let dims = Dims::new(4, 3, 2, 2).unwrap();
        let (data, truth) =
            gen_dataset(dims, 1, 20, Some(NoiseModelSpec::identity()), DatasetSeeds::from_base(2)).unwrap();
        let t = &truth.terms[0];
        let mut state = MleState::from_factors(t.beta1.clone(), t.beta2.clone());
        state.sigma1 = Mat::from_fn(4, 4, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
        state.sigma2 = Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.3 });
        let a = log_likelihood(&state, &data).unwrap();
        state.sigma1 *= 3.0;
        state.sigma2 /= 3.0;
        let b = log_likelihood(&state, &data).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let (data, truth) = gen_dataset(dims, 1, 5, None, DatasetSeeds::from_base(3)).unwrap();
        let t = &truth.terms[0];
        let mut state = MleState::from_factors(t.beta1.clone(), t.beta2.clone());
        state.sigma1[(1, 1)] = -1.0;
        assert!(matches!(log_likelihood(&state, &data), Err(Error::Numeric(_))));
    }

    #[test]
    fn noiseless_data_converges_quickly_to_truth() {
        let dims = Dims::new(5, 4, 2, 2).unwrap();
        let (data, truth) = gen_dataset(dims, 1, 30, None, DatasetSeeds::from_base(4)).unwrap();
        let state = mle_fit(&data, None, &MleOptions::default()).unwrap();
        assert!(state.converged);
        assert!(state.iterations <= 2, "iterations {}", state.iterations);
        assert!(relative_error(&state.nu_hat(), &truth.nu()).unwrap() < 1e-6);
        assert_monotone(&state.loglik_trace);
    }

    #[test]
    fn scalar_model_matches_closed_form() {
        // y = b x + e: b_hat = Σxy/Σx², σ1 σ2 = RSS/n
        let dims = Dims::new(1, 1, 1, 1).unwrap();
        let x = gen_design(50, &dims, 5);
        let e = gen_design(50, &dims, 6);
        let y = &x * 1.7 + &e * 0.4;
        let data = Dataset::new(dims, x.clone(), y.clone()).unwrap();
        let state = mle_fit(&data, None, &MleOptions::default()).unwrap();
        let b = x.dot(&y) / x.dot(&x);
        let rss = (&y - &x * b).norm_squared();
        assert_relative_eq!(state.nu_hat()[(0, 0)], b, max_relative = 1e-10);
        assert_relative_eq!(state.sigma1[(0, 0)] * state.sigma2[(0, 0)], rss / 50.0, max_relative = 1e-10);
        assert_relative_eq!(state.sigma2[(0, 0)], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn loglik_is_monotone_and_normalized() {
        let dims = Dims::new(6, 5, 2, 2).unwrap();
        for (seed, spec) in [
            (7, NoiseModelSpec::ar1(0.8)),
            (8, NoiseModelSpec::banded(2, 3)),
            (9, NoiseModelSpec::heavy_tailed()),
        ] {
            let (data, _) = gen_dataset(dims, 1, 40, Some(spec), DatasetSeeds::from_base(seed)).unwrap();
            let state = mle_fit(&data, None, &MleOptions::default()).unwrap();
            assert_monotone(&state.loglik_trace);
            assert_relative_eq!(state.beta1.norm(), state.beta2.norm(), max_relative = 1e-10);
            assert_relative_eq!(state.sigma2.norm(), 1.0, max_relative = 1e-10);
            assert!(state.beta2[(0, 0)] >= 0.0);
            assert!((&state.sigma1 - state.sigma1.transpose()).amax() <= 1e-10);
            assert!((&state.sigma2 - state.sigma2.transpose()).amax() <= 1e-10);
            // the normalization did not move the likelihood
            let recomputed = log_likelihood(&state, &data).unwrap();
            assert_relative_eq!(recomputed, state.loglik, max_relative = 1e-10);
        }
    }

    #[test]
    fn normalization_preserves_likelihood() {
        let dims = Dims::new(4, 3, 2, 2).unwrap();
        let (data, truth) =
            gen_dataset(dims, 1, 25, Some(NoiseModelSpec::identity()), DatasetSeeds::from_base(10)).unwrap();
        let t = &truth.terms[0];
        let mut state = MleState::from_factors(&t.beta1 * 3.0, &t.beta2 * -0.5);
        state.sigma1 = Mat::identity(4, 4) * 0.5;
        state.sigma2 = Mat::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 });
        let before = log_likelihood(&state, &data).unwrap();
        normalize(&mut state);
        let after = log_likelihood(&state, &data).unwrap();
        assert!((before - after).abs() <= 1e-10 * before.abs());
    }

    #[test]
    fn frozen_identity_covariance_matches_estimator_on_noiseless_data() {
        let dims = Dims::new(5, 6, 2, 3).unwrap();
        let (data, _) = gen_dataset(dims, 1, 40, None, DatasetSeeds::from_base(11)).unwrap();
        let opts = MleOptions { max_iter: 1, fix_covariance: true, ..Default::default() };
        let state = mle_fit(&data, None, &opts).unwrap();
        let kpf = kro_pro_fac(&data, &FitOptions::with_d(1)).unwrap();
        assert!(relative_error(&state.nu_hat(), &kpf.nu_hat()).unwrap() < 1e-6);
        assert_eq!(state.sigma1, Mat::identity(5, 5));
    }

    #[test]
    fn singular_conditional_system_uses_pseudo_inverse() {
        // q1 = 2 but every X_i has a zero first row, so M is singular
        let dims = Dims::new(3, 3, 2, 1).unwrap();
        let mut x = gen_design(20, &dims, 12);
        x.column_mut(0).fill(0.0);
        let y = gen_design(20, &Dims::new(1, 1, 9, 1).unwrap(), 13);
        let data = Dataset::new(dims, x, y).unwrap();
        let init = MleState::from_factors(Mat::from_element(3, 2, 1.0), Mat::from_element(3, 1, 1.0));
        let state = mle_fit(&data, Some(init), &MleOptions { max_iter: 3, ..Default::default() }).unwrap();
        assert!(state.pinv_fallback);
    }
}
