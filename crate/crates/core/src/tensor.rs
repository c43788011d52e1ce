//! Shape-level algebra: vectorization, Kronecker products and the
//! Pitsianis–Van Loan rearrangement.
//!
//! Block indices in the docs below are 0-based. A `p1*p2 x q1*q2` matrix is
//! viewed as a `p2 x q2` grid of `p1 x q1` blocks; the rearrangement stacks
//! `vec(block(i, j))^T` as row `j * p2 + i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix. Storage is column-major, which makes `vec` a view of
/// the backing slice.
pub type Mat = DMatrix<f64>;

/// Response (`p1 x p2`) and predictor (`q1 x q2`) dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub p1: usize,
    pub p2: usize,
    pub q1: usize,
    pub q2: usize,
}

impl Dims {
    pub fn new(p1: usize, p2: usize, q1: usize, q2: usize) -> Result<Self> {
        let dims = Dims { p1, p2, q1, q2 };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p1 == 0 || self.p2 == 0 || self.q1 == 0 || self.q2 == 0 {
            return Err(Error::arg(format!("all dimensions must be >= 1, got {self}")));
        }
        Ok(())
    }

    /// Length of `vec(Y_i)`.
    pub fn p(&self) -> usize {
        self.p1 * self.p2
    }

    /// Length of `vec(X_i)`.
    pub fn q(&self) -> usize {
        self.q1 * self.q2
    }

    /// Shape of `R(M)` for a coefficient matrix `M` of shape `p x q`.
    pub fn rearranged_shape(&self) -> (usize, usize) {
        (self.p2 * self.q2, self.p1 * self.q1)
    }

    /// Largest number of Kronecker terms a coefficient can carry.
    pub fn max_kron_rank(&self) -> usize {
        (self.p1 * self.q1).min(self.p2 * self.q2)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(p1={}, p2={}, q1={}, q2={})", self.p1, self.p2, self.q1, self.q2)
    }
}

/// Column-major vectorization.
pub fn vec(m: &Mat) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vec`]: reshape a length `p*q` vector into a `p x q` matrix.
pub fn vec_inv(v: &[f64], p: usize, q: usize) -> Result<Mat> {
    if v.len() != p * q {
        return Err(Error::dim(format!(
            "vec_inv: length {} does not equal {p} x {q}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(p, q, v))
}

/// Kronecker product `a ⊗ b`; block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Mat::zeros(ra * rb, ca * cb);
    for j in 0..ca {
        for i in 0..ra {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for l in 0..cb {
                for k in 0..rb {
                    out[(i * rb + k, j * cb + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

fn check_coef_shape(m: &Mat, dims: &Dims, what: &str) -> Result<()> {
    if m.nrows() != dims.p() || m.ncols() != dims.q() {
        return Err(Error::dim(format!(
            "{what}: expected {} x {} for {dims}, got {} x {}",
            dims.p(),
            dims.q(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Rearrangement `R(M)`: maps a `p1p2 x q1q2` matrix to `p2q2 x p1q1`.
///
/// Entry `(j*p2 + i, l*p1 + k)` of the output is `M(i*p1 + k, j*q1 + l)`.
pub fn rearrange(m: &Mat, dims: &Dims) -> Result<Mat> {
    check_coef_shape(m, dims, "rearrange")?;
    let Dims { p1, p2, q1, q2 } = *dims;
    let (rows, cols) = dims.rearranged_shape();
    let mut data = Vec::with_capacity(rows * cols);
    for l in 0..q1 {
        for k in 0..p1 {
            for j in 0..q2 {
                for i in 0..p2 {
                    data.push(m[(i * p1 + k, j * q1 + l)]);
                }
            }
        }
    }
    Ok(Mat::from_vec(rows, cols, data))
}

/// Inverse of [`rearrange`].
pub fn rearrange_inv(r: &Mat, dims: &Dims) -> Result<Mat> {
    let (rows, cols) = dims.rearranged_shape();
    if r.nrows() != rows || r.ncols() != cols {
        return Err(Error::dim(format!(
            "rearrange_inv: expected {rows} x {cols} for {dims}, got {} x {}",
            r.nrows(),
            r.ncols()
        )));
    }
    let Dims { p1, p2, q1, q2 } = *dims;
    let mut out = Mat::zeros(dims.p(), dims.q());
    for l in 0..q1 {
        for k in 0..p1 {
            let c = l * p1 + k;
            for j in 0..q2 {
                for i in 0..p2 {
                    out[(i * p1 + k, j * q1 + l)] = r[(j * p2 + i, c)];
                }
            }
        }
    }
    Ok(out)
}
