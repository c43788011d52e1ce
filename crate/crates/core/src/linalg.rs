//! SVD engines, least squares, and subspace distances.

use nalgebra::{Cholesky, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Maximum number of implicit-shift sweeps handed to the dense SVD kernel.
pub const SVD_MAX_ITER: usize = 10_000;

/// Reciprocal condition number below which a design is treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// Rows per accumulation chunk for the normal equations.
///
/// Simulation streams data in chunks of exactly this size so that
/// in-memory and streamed fits perform identical floating-point work.
pub const CHUNK_ROWS: usize = 64;

pub const DEFAULT_OVERSAMPLE: usize = 10;
pub const DEFAULT_POWER_ITERS: usize = 2;

/// Thin singular value decomposition `M = U diag(s) V^T` with descending `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keep the leading `k` triplets.
    pub fn truncate(mut self, k: usize) -> Self {
        let k = k.min(self.s.len());
        self.u = self.u.columns(0, k).clone_owned();
        self.v = self.v.columns(0, k).clone_owned();
        self.s.truncate(k);
        self
    }

    pub fn reconstruct(&self) -> Mat {
        let mut us = self.u.clone();
        for (k, &sk) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(sk);
        }
        us * self.v.transpose()
    }

    /// Flip each pair so the largest-magnitude entry of the left vector is
    /// positive (ties go to the lowest index).
    fn fix_signs(&mut self) {
        for k in 0..self.s.len() {
            let col = self.u.column(k);
            let mut best = 0;
            let mut best_abs = -1.0;
            for (i, &x) in col.iter().enumerate() {
                if x.abs() > best_abs {
                    best_abs = x.abs();
                    best = i;
                }
            }
            if col[best] < 0.0 {
                self.u.column_mut(k).neg_mut();
                self.v.column_mut(k).neg_mut();
            }
        }
    }
}

fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what}: input contains non-finite entries")));
    }
    Ok(())
}

/// Full thin SVD; `k = min(rows, cols)` triplets.
pub fn svd_full(m: &Mat) -> Result<SvdFactors> {
    ensure_finite(m, "svd_full")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::dim("svd_full: empty matrix"));
    }
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm.thin_svd();
    let (fu, fs, fv) = (svd.u(), svd.s_diagonal(), svd.v());
    let k = rows.min(cols);
    if (0..k).any(|i| !fs.read(i).is_finite()) {
        return Err(Error::NoConvergence { iterations: SVD_MAX_ITER });
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| fs.read(b).total_cmp(&fs.read(a)).then(a.cmp(&b)));
    let mut out = SvdFactors {
        u: Mat::zeros(rows, k),
        s: Vec::with_capacity(k),
        v: Mat::zeros(cols, k),
    };
    for (dst, &src) in order.iter().enumerate() {
        out.s.push(fs.read(src).max(0.0));
        for i in 0..rows {
            out.u[(i, dst)] = fu.read(i, src);
        }
        for j in 0..cols {
            out.v[(j, dst)] = fv.read(j, src);
        }
    }
    out.fix_signs();
    Ok(out)
}

/// Leading `k` triplets of [`svd_full`].
pub fn svd_truncated(m: &Mat, k: usize) -> Result<SvdFactors> {
    let kmax = m.nrows().min(m.ncols());
    if k == 0 || k > kmax {
        return Err(Error::arg(format!("svd_truncated: k = {k} outside 1..={kmax}")));
    }
    Ok(svd_full(m)?.truncate(k))
}

fn orthonormal_range(y: Mat) -> Mat {
    y.qr().q()
}

/// Randomized SVD by Gaussian sketching with subspace (power) iteration.
///
/// Deterministic for a given `seed`: the test matrix is drawn from a
/// ChaCha8 stream seeded with it.
pub fn svd_randomized(
    m: &Mat,
    k: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<SvdFactors> {
    ensure_finite(m, "svd_randomized")?;
    let (rows, cols) = m.shape();
    let kmax = rows.min(cols);
    let width = k + oversample;
    if k == 0 || width > kmax {
        return Err(Error::arg(format!(
            "svd_randomized: k + oversample = {width} must lie in 1..={kmax} (k = {k})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Mat::from_fn(cols, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = orthonormal_range(m * omega);
    for _ in 0..power_iters {
        let z = orthonormal_range(m.tr_mul(&q));
        q = orthonormal_range(m * z);
    }
    let b = q.tr_mul(m);
    let small = svd_full(&b)?;
    let mut out = SvdFactors {
        u: q * small.u,
        s: small.s,
        v: small.v,
    }
    .truncate(k);
    out.fix_signs();
    Ok(out)
}

/// Running sums `X^T X` and `Y^T X` for ordinary least squares.
///
/// Samples arrive in chunks: `x` holds `c` rows of the design and `yt` the
/// matching `c` responses as columns (`p x c`).
#[derive(Debug, Clone)]
pub struct NormalEquations {
    xtx: Mat,
    ytx: Mat,
    n: usize,
}

impl NormalEquations {
    pub fn new(q: usize, p: usize) -> Self {
        NormalEquations {
            xtx: Mat::zeros(q, q),
            ytx: Mat::zeros(p, q),
            n: 0,
        }
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn add_chunk(&mut self, x: &Mat, yt: &Mat) -> Result<()> {
        let q = self.xtx.nrows();
        let p = self.ytx.nrows();
        if x.ncols() != q || yt.nrows() != p || yt.ncols() != x.nrows() {
            return Err(Error::dim(format!(
                "normal equations chunk: design {}x{}, responses {}x{}, expected q={q}, p={p}",
                x.nrows(),
                x.ncols(),
                yt.nrows(),
                yt.ncols()
            )));
        }
        self.xtx.gemm(1.0, &x.transpose(), x, 1.0);
        self.ytx.gemm(1.0, yt, x, 1.0);
        self.n += x.nrows();
        Ok(())
    }

    /// Feed an in-memory design and stacked responses (`n x p`) in
    /// [`CHUNK_ROWS`]-sized chunks.
    pub fn add_rows(&mut self, x: &Mat, y: &Mat) -> Result<()> {
        if x.nrows() != y.nrows() {
            return Err(Error::dim(format!(
                "design has {} rows but responses have {}",
                x.nrows(),
                y.nrows()
            )));
        }
        let n = x.nrows();
        let mut start = 0;
        while start < n {
            let c = CHUNK_ROWS.min(n - start);
            let xc = x.rows(start, c).clone_owned();
            let yt = y.rows(start, c).transpose();
            self.add_chunk(&xc, &yt)?;
            start += c;
        }
        Ok(())
    }

    fn factor(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let q = self.xtx.nrows();
        if self.n < q {
            return Err(Error::SingularDesign { rcond: 0.0, threshold: RCOND_THRESHOLD });
        }
        let eig = SymmetricEigen::new(self.xtx.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let rcond = if max > 0.0 { (min / max).max(0.0) } else { 0.0 };
        if !(rcond >= RCOND_THRESHOLD) {
            return Err(Error::SingularDesign { rcond, threshold: RCOND_THRESHOLD });
        }
        Cholesky::new(self.xtx.clone())
            .ok_or(Error::SingularDesign { rcond, threshold: RCOND_THRESHOLD })
    }

    /// `(X^T X)^{-1} X^T Y`, shape `q x p`.
    pub fn solve(&self) -> Result<Mat> {
        let chol = self.factor()?;
        Ok(chol.solve(&self.ytx.transpose()))
    }
}

/// Least squares coefficients `(X^T X)^{-1} X^T Y` for `x: n x q`, `y: n x p`.
pub fn ols_solve(x: &Mat, y: &Mat) -> Result<Mat> {
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign { rcond: 0.0, threshold: RCOND_THRESHOLD });
    }
    let mut ne = NormalEquations::new(x.ncols(), y.ncols());
    ne.add_rows(x, y)?;
    ne.solve()
}

/// Largest absolute deviation of `W^T W` from the identity.
pub fn orthonormality_defect(w: &Mat) -> f64 {
    let g = w.tr_mul(w);
    let k = g.nrows();
    (g - Mat::identity(k, k)).amax()
}

/// Modified Gram–Schmidt on the columns of `m`. Columns are orthogonalized
/// against their predecessors and then scaled to unit norm.
pub fn orthonormalize(m: &Mat) -> Result<Mat> {
    let mut q = m.clone();
    for k in 0..q.ncols() {
        for j in 0..k {
            let proj = q.column(j).dot(&q.column(k));
            let qj = q.column(j).clone_owned();
            q.column_mut(k).axpy(-proj, &qj, 1.0);
        }
        let norm = q.column(k).norm();
        if norm <= f64::EPSILON * m.column(k).norm().max(f64::MIN_POSITIVE) {
            return Err(Error::arg(format!("orthonormalize: column {k} is linearly dependent")));
        }
        q.column_mut(k).unscale_mut(norm);
    }
    Ok(q)
}

/// sin-Θ distance between the column spaces of orthonormal `w1` and `w2`,
/// computed as `‖(I - W1 W1^T) W2‖₂` (accurate for tiny angles).
pub fn sin_theta(w1: &Mat, w2: &Mat) -> Result<f64> {
    if w1.shape() != w2.shape() {
        return Err(Error::arg(format!(
            "sin_theta: shapes {:?} and {:?} differ",
            w1.shape(),
            w2.shape()
        )));
    }
    for (name, w) in [("first", w1), ("second", w2)] {
        let defect = orthonormality_defect(w);
        if defect > 1e-6 {
            return Err(Error::arg(format!(
                "sin_theta: {name} argument is not orthonormal (Gram defect {defect:.2e})"
            )));
        }
    }
    // ‖(I - W1 W1^T) W2‖_2 stays accurate for small angles, unlike sqrt(1 - cos²)
    let residual = w2 - w1 * w1.tr_mul(w2);
    Ok(spectral_norm(&residual)?.min(1.0))
}

/// Moore–Penrose inverse; singular values at or below `rtol * σ_1` are dropped.
pub fn pseudo_inverse(m: &Mat, rtol: f64) -> Result<Mat> {
    let svd = svd_full(m)?;
    let cut = rtol * svd.s.first().copied().unwrap_or(0.0);
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.s.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += svd.v.column(k) * svd.u.column(k).transpose() / s;
        }
    }
    Ok(out)
}

pub fn nuclear_norm(m: &Mat) -> Result<f64> {
    Ok(svd_full(m)?.s.iter().sum())
}

pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(svd_full(m)?.s.first().copied().unwrap_or(0.0))
}
