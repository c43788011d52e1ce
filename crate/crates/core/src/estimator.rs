//! The KRO-PRO-FAC estimator: OLS, rearrangement, truncated SVD, rank
//! selection by singular-value ratios, and factor extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, svd_full, svd_randomized, svd_truncated, NormalEquations, SvdFactors,
    DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS,
};
use crate::simgen::Dataset;
use crate::tensor::{kron, rearrange, rearrange_inv, vec_inv, Dims, Mat};

/// Relative threshold under which a trailing singular value counts as zero
/// in the ratio criterion.
pub const RANK_EPS: f64 = 1e-12;

/// Rearranged matrices whose smaller side exceeds this use the randomized SVD.
pub const FULL_SVD_LIMIT: usize = 512;

/// Seed for the randomized engine when none is supplied.
pub const DEFAULT_SVD_SEED: u64 = 0x6b70_6673_7664;

/// One Kronecker term `beta2 ⊗ beta1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerTerm {
    /// Row factor, `p1 x q1`.
    pub beta1: Mat,
    /// Column factor, `p2 x q2`.
    pub beta2: Mat,
}

/// `ν = Σ_k beta2_k ⊗ beta1_k`, stored through its factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerCoefficients {
    pub dims: Dims,
    pub terms: Vec<KroneckerTerm>,
    /// Singular values of `R(ν)` associated with each term, descending.
    pub sigma: Vec<f64>,
}

impl KroneckerCoefficients {
    pub fn d(&self) -> usize {
        self.terms.len()
    }

    /// Split the leading `d` triplets of an SVD of `R(ν)` symmetrically:
    /// `vec(beta2_k) = sqrt(σ_k) u_k`, `vec(beta1_k) = sqrt(σ_k) v_k`.
    pub fn from_svd(dims: Dims, svd: &SvdFactors, d: usize) -> Result<Self> {
        if d == 0 || d > svd.rank() {
            return Err(Error::arg(format!(
                "cannot take {d} Kronecker terms from {} singular triplets",
                svd.rank()
            )));
        }
        let mut terms = Vec::with_capacity(d);
        for k in 0..d {
            let scale = svd.s[k].sqrt();
            let u: Vec<f64> = svd.u.column(k).iter().map(|x| x * scale).collect();
            let v: Vec<f64> = svd.v.column(k).iter().map(|x| x * scale).collect();
            terms.push(KroneckerTerm {
                beta1: vec_inv(&v, dims.p1, dims.q1)?,
                beta2: vec_inv(&u, dims.p2, dims.q2)?,
            });
        }
        Ok(KroneckerCoefficients {
            dims,
            terms,
            sigma: svd.s[..d].to_vec(),
        })
    }

    /// Materialize `ν` (`p1p2 x q1q2`).
    pub fn nu(&self) -> Mat {
        let mut nu = Mat::zeros(self.dims.p(), self.dims.q());
        for t in &self.terms {
            nu += kron(&t.beta2, &t.beta1);
        }
        nu
    }

    /// `R(ν) = Σ_k vec(beta2_k) vec(beta1_k)^T`.
    pub fn rearranged(&self) -> Mat {
        let (rows, cols) = self.dims.rearranged_shape();
        let mut r = Mat::zeros(rows, cols);
        for t in &self.terms {
            let u = nalgebra::DVector::from_column_slice(t.beta2.as_slice());
            let v = nalgebra::DVector::from_column_slice(t.beta1.as_slice());
            r.ger(1.0, &u, &v, 1.0);
        }
        r
    }
}

/// Which SVD kernel factors `R(ν̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdEngine {
    /// Dense SVD for small rearranged matrices, randomized otherwise.
    Auto,
    Full,
    Randomized {
        oversample: usize,
        power_iters: usize,
        seed: u64,
    },
}

impl Default for SvdEngine {
    fn default() -> Self {
        SvdEngine::Auto
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Largest rank considered by the ratio criterion; defaults to
    /// `min(10, min(p1 q1, p2 q2) - 1)`.
    pub d_bar: Option<usize>,
    /// Use exactly this many terms instead of the ratio criterion.
    pub d_fixed: Option<usize>,
    pub engine: SvdEngine,
}

impl FitOptions {
    pub fn with_d(d: usize) -> Self {
        FitOptions { d_fixed: Some(d), ..Default::default() }
    }
}

/// Output of [`kro_pro_fac`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coefficients: KroneckerCoefficients,
    /// Singular values of `R(ν̃)` that were computed: the whole spectrum for
    /// the dense engine, the leading ones for the randomized engine.
    pub singular_values_all: Vec<f64>,
    pub d_bar: usize,
    /// Pick of the ratio criterion (1 when `d_bar == 0`).
    pub d_selected: usize,
    /// `σ_j / σ_{j+1}` for `j = 1..=d_bar`.
    pub selection_ratios: Vec<f64>,
    /// Leading left singular vectors of `R(ν̃)`, one per fitted term.
    pub u_hat: Mat,
    /// Leading right singular vectors of `R(ν̃)`, one per fitted term.
    pub v_hat: Mat,
    pub randomized: bool,
}

impl FitReport {
    pub fn d(&self) -> usize {
        self.coefficients.d()
    }

    pub fn nu_hat(&self) -> Mat {
        self.coefficients.nu()
    }
}

pub fn default_d_bar(dims: &Dims) -> usize {
    10.min(dims.max_kron_rank().saturating_sub(1))
}

/// OLS coefficient `ν̃ = [(X^T X)^{-1} X^T Y]^T`, shape `p1p2 x q1q2`.
pub fn fit_ols_nu(data: &Dataset) -> Result<Mat> {
    let mut ne = NormalEquations::new(data.dims.q(), data.dims.p());
    ne.add_rows(&data.x, &data.y)?;
    Ok(ne.solve()?.transpose())
}

fn ratios(sigmas: &[f64], d_bar: usize) -> Vec<f64> {
    let floor = RANK_EPS * sigmas[0];
    (0..d_bar)
        .map(|j| {
            if sigmas[j + 1] <= floor {
                f64::INFINITY
            } else {
                sigmas[j] / sigmas[j + 1]
            }
        })
        .collect()
}

/// `argmax_{j in 1..=d_bar} σ_j / σ_{j+1}` (1-based). A trailing value at or
/// below `RANK_EPS * σ_1` makes its ratio infinite; ties go to the smallest `j`.
pub fn select_rank(sigmas: &[f64], d_bar: usize) -> Result<usize> {
    if d_bar == 0 || sigmas.len() < d_bar + 1 {
        return Err(Error::arg(format!(
            "select_rank: d_bar = {d_bar} needs 1 <= d_bar < {}",
            sigmas.len()
        )));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) || sigmas.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::arg("select_rank: singular values must be nonnegative and descending"));
    }
    Ok(argmax_first(&ratios(sigmas, d_bar)) + 1)
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &r) in v.iter().enumerate() {
        if r > v[best] {
            best = j;
        }
    }
    best
}

/// Run the factorization half of the estimator on an OLS coefficient.
pub fn factorize_nu(nu_tilde: &Mat, dims: &Dims, opts: &FitOptions) -> Result<FitReport> {
    dims.validate()?;
    let r = rearrange(nu_tilde, dims)?;
    let max_rank = dims.max_kron_rank();
    let d_bar = match opts.d_bar {
        Some(d) if d == 0 || d + 1 > max_rank => {
            return Err(Error::arg(format!(
                "d_bar = {d} must lie in 1..={}",
                max_rank.saturating_sub(1)
            )))
        }
        Some(d) => d,
        None => default_d_bar(dims),
    };
    if let Some(d) = opts.d_fixed {
        if d == 0 || d > max_rank {
            return Err(Error::arg(format!("d = {d} must lie in 1..={max_rank}")));
        }
    }
    let needed = (d_bar + 1).max(opts.d_fixed.unwrap_or(1)).min(max_rank);

    let (svd, randomized) = match opts.engine {
        SvdEngine::Full => (svd_full(&r)?, false),
        SvdEngine::Randomized { oversample, power_iters, seed } => {
            (randomized_or_full(&r, needed, oversample, power_iters, seed)?, true)
        }
        SvdEngine::Auto if max_rank <= FULL_SVD_LIMIT => (svd_full(&r)?, false),
        SvdEngine::Auto => (
            randomized_or_full(&r, needed, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, DEFAULT_SVD_SEED)?,
            true,
        ),
    };

    let (d_selected, selection_ratios) = if d_bar == 0 {
        (1, Vec::new())
    } else {
        let rs = ratios(&svd.s, d_bar);
        (argmax_first(&rs) + 1, rs)
    };
    let d = opts.d_fixed.unwrap_or(d_selected);
    let coefficients = KroneckerCoefficients::from_svd(*dims, &svd, d)?;
    Ok(FitReport {
        coefficients,
        singular_values_all: svd.s.clone(),
        d_bar,
        d_selected,
        selection_ratios,
        u_hat: svd.u.columns(0, d).clone_owned(),
        v_hat: svd.v.columns(0, d).clone_owned(),
        randomized,
    })
}

fn randomized_or_full(
    r: &Mat,
    k: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<SvdFactors> {
    let kmax = r.nrows().min(r.ncols());
    if k + oversample > kmax {
        return svd_full(r);
    }
    svd_randomized(r, k, oversample, power_iters, seed)
}

/// The full estimator on a dataset.
pub fn kro_pro_fac(data: &Dataset, opts: &FitOptions) -> Result<FitReport> {
    let nu_tilde = fit_ols_nu(data)?;
    factorize_nu(&nu_tilde, &data.dims, opts)
}

/// Nearest rank-`alpha` approximation of one response, given as `vec(Y_i)`.
pub fn truncate_response(vec_y: &[f64], dims: &Dims, alpha: usize) -> Result<Vec<f64>> {
    let kmax = dims.p1.min(dims.p2);
    if alpha == 0 || alpha > kmax {
        return Err(Error::arg(format!("alpha = {alpha} must lie in 1..={kmax}")));
    }
    let y = vec_inv(vec_y, dims.p1, dims.p2)?;
    Ok(svd_truncated(&y, alpha)?.reconstruct().as_slice().to_vec())
}

/// Replace every `Y_i` by its nearest rank-`alpha` approximation.
pub fn variant_low_rank_response(data: &Dataset, alpha: usize) -> Result<Dataset> {
    let dims = data.dims;
    let kmax = dims.p1.min(dims.p2);
    if alpha == 0 || alpha > kmax {
        return Err(Error::arg(format!("alpha = {alpha} must lie in 1..={kmax}")));
    }
    let mut out = data.clone();
    for i in 0..data.n() {
        let row: Vec<f64> = data.y.row(i).iter().copied().collect();
        let t = truncate_response(&row, &dims, alpha)?;
        for (j, v) in t.into_iter().enumerate() {
            out.y[(i, j)] = v;
        }
    }
    out.seed_record = None;
    Ok(out)
}

/// Nearest rank-`gamma` approximation of `ν̃` itself (before rearrangement).
pub fn variant_reduced_rank_ols(nu_tilde: &Mat, gamma: usize) -> Result<Mat> {
    let kmax = nu_tilde.nrows().min(nu_tilde.ncols());
    if gamma == 0 || gamma > kmax {
        return Err(Error::arg(format!("gamma = {gamma} must lie in 1..={kmax}")));
    }
    Ok(svd_truncated(nu_tilde, gamma)?.reconstruct())
}

/// `Σ_k beta1_k X beta2_k^T` for a new `q1 x q2` predictor.
pub fn predict(coeffs: &KroneckerCoefficients, x_new: &Mat) -> Result<Mat> {
    let dims = coeffs.dims;
    if x_new.shape() != (dims.q1, dims.q2) {
        return Err(Error::dim(format!(
            "predict: expected {} x {} predictor, got {} x {}",
            dims.q1,
            dims.q2,
            x_new.nrows(),
            x_new.ncols()
        )));
    }
    let mut y = Mat::zeros(dims.p1, dims.p2);
    for t in &coeffs.terms {
        y += &t.beta1 * x_new * t.beta2.transpose();
    }
    Ok(y)
}

/// `Σ_k kron(beta2_k, beta1_k)` rebuilt from the truncated SVD of `R(ν̃)`,
/// used to cross-check factor extraction.
pub fn nu_from_svd(dims: &Dims, svd: &SvdFactors, d: usize) -> Result<Mat> {
    rearrange_inv(&svd.clone().truncate(d).reconstruct(), dims)
}

/// Singular values of `R(ν)` for arbitrary (not necessarily orthogonal) factors.
pub fn true_spectrum(coeffs: &KroneckerCoefficients) -> Result<Vec<f64>> {
    let r = coeffs.rearranged();
    let d = coeffs.d();
    Ok(linalg::svd_full(&r)?.s.into_iter().take(d).collect())
}
