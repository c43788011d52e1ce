//! Python bindings. Matrices cross the boundary as 2-D float64 NumPy arrays;
//! sample stacks for the two-group analysis as 3-D arrays `(n, p1, p2)`.

use kroprofac::estimator::{self, FitOptions, FitReport};
use kroprofac::mle::{mle_fit as mle_fit_core, MleOptions};
use kroprofac::simgen::gen_dataset;
use kroprofac::{tensor, Dataset, DatasetSeeds, Error, GroupData, Mat, NoiseModelSpec, TwoGroupOptions};
use numpy::ndarray::Array2;
use numpy::{IntoPyArray, PyArray2, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::SingularDesign { .. } | Error::NoConvergence { .. } | Error::Numeric(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_mat(a: &PyReadonlyArray2<'_, f64>) -> Mat {
    let v = a.as_array();
    let (r, c) = v.dim();
    Mat::from_fn(r, c, |i, j| v[[i, j]])
}

fn to_array<'py>(py: Python<'py>, m: &Mat) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_fn(m.shape(), |(i, j)| m[(i, j)]).into_pyarray_bound(py)
}

/// Coefficient shapes: `β1` is `p1 x q1`, `β2` is `p2 x q2`.
#[pyclass(name = "Dims", frozen)]
#[derive(Clone, Copy)]
struct PyDims(kroprofac::Dims);

#[pymethods]
impl PyDims {
    #[new]
    fn new(p1: usize, p2: usize, q1: usize, q2: usize) -> PyResult<Self> {
        kroprofac::Dims::new(p1, p2, q1, q2).map(PyDims).map_err(to_py)
    }
    #[getter]
    fn p1(&self) -> usize {
        self.0.p1
    }
    #[getter]
    fn p2(&self) -> usize {
        self.0.p2
    }
    #[getter]
    fn q1(&self) -> usize {
        self.0.q1
    }
    #[getter]
    fn q2(&self) -> usize {
        self.0.q2
    }
    #[getter]
    fn p(&self) -> usize {
        self.0.p()
    }
    #[getter]
    fn q(&self) -> usize {
        self.0.q()
    }
    fn max_kron_rank(&self) -> usize {
        self.0.max_kron_rank()
    }
    fn __repr__(&self) -> String {
        let d = self.0;
        format!("Dims(p1={}, p2={}, q1={}, q2={})", d.p1, d.p2, d.q1, d.q2)
    }
}

/// Result of a Kronecker product factorization fit.
#[pyclass(name = "FitResult", frozen)]
struct PyFit(FitReport);

#[pymethods]
impl PyFit {
    /// Number of fitted Kronecker terms.
    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }
    /// Rank picked by the ratio criterion (differs from `d` when fixed).
    #[getter]
    fn d_selected(&self) -> usize {
        self.0.d_selected
    }
    #[getter]
    fn d_bar(&self) -> usize {
        self.0.d_bar
    }
    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.0.singular_values_all.clone()
    }
    #[getter]
    fn selection_ratios(&self) -> Vec<f64> {
        self.0.selection_ratios.clone()
    }
    #[getter]
    fn randomized(&self) -> bool {
        self.0.randomized
    }
    /// `β1` of term `k` (0-based).
    fn beta1<'py>(&self, py: Python<'py>, k: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        self.term(k).map(|t| to_array(py, &t.beta1))
    }
    fn beta2<'py>(&self, py: Python<'py>, k: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        self.term(k).map(|t| to_array(py, &t.beta2))
    }
    /// `Σ β2k ⊗ β1k`, shape `p1p2 x q1q2`.
    fn nu_hat<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        to_array(py, &self.0.nu_hat())
    }
    /// Predicted `p1 x p2` response for one `q1 x q2` predictor.
    fn predict<'py>(&self, py: Python<'py>, x: PyReadonlyArray2<'_, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let y = estimator::predict(&self.0.coefficients, &to_mat(&x)).map_err(to_py)?;
        Ok(to_array(py, &y))
    }
    fn __repr__(&self) -> String {
        format!("FitResult(d={}, d_selected={}, d_bar={})", self.0.d(), self.0.d_selected, self.0.d_bar)
    }
}

impl PyFit {
    fn term(&self, k: usize) -> PyResult<&estimator::KroneckerTerm> {
        self.0
            .coefficients
            .terms
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("term {k} out of range 0..{}", self.0.d())))
    }
}

fn options(d: Option<usize>, d_bar: Option<usize>) -> FitOptions {
    FitOptions { d_bar, d_fixed: d, ..Default::default() }
}

/// Fit from a design (`n x q1q2`, row i = vec(X_i)) and responses (`n x p1p2`).
#[pyfunction]
#[pyo3(signature = (x, y, dims, d=None, d_bar=None))]
fn fit(x: PyReadonlyArray2<'_, f64>, y: PyReadonlyArray2<'_, f64>, dims: PyDims, d: Option<usize>, d_bar: Option<usize>) -> PyResult<PyFit> {
    let data = Dataset::new(dims.0, to_mat(&x), to_mat(&y)).map_err(to_py)?;
    estimator::kro_pro_fac(&data, &options(d, d_bar)).map(PyFit).map_err(to_py)
}

/// Factorize a given `p1p2 x q1q2` coefficient estimate.
#[pyfunction]
#[pyo3(signature = (nu, dims, d=None, d_bar=None))]
fn factorize(nu: PyReadonlyArray2<'_, f64>, dims: PyDims, d: Option<usize>, d_bar: Option<usize>) -> PyResult<PyFit> {
    estimator::factorize_nu(&to_mat(&nu), &dims.0, &options(d, d_bar)).map(PyFit).map_err(to_py)
}

#[pyfunction]
fn kron<'py>(py: Python<'py>, a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> Bound<'py, PyArray2<f64>> {
    to_array(py, &tensor::kron(&to_mat(&a), &to_mat(&b)))
}

/// `p1p2 x q1q2` to `p2q2 x p1q1`; Kronecker rank becomes matrix rank.
#[pyfunction]
fn rearrange<'py>(py: Python<'py>, m: PyReadonlyArray2<'_, f64>, dims: PyDims) -> PyResult<Bound<'py, PyArray2<f64>>> {
    tensor::rearrange(&to_mat(&m), &dims.0).map(|r| to_array(py, &r)).map_err(to_py)
}

#[pyfunction]
fn rearrange_inv<'py>(py: Python<'py>, r: PyReadonlyArray2<'_, f64>, dims: PyDims) -> PyResult<Bound<'py, PyArray2<f64>>> {
    tensor::rearrange_inv(&to_mat(&r), &dims.0).map(|m| to_array(py, &m)).map_err(to_py)
}

/// Ratio-criterion rank from descending singular values.
#[pyfunction]
fn select_rank(sigmas: Vec<f64>, d_bar: usize) -> PyResult<usize> {
    estimator::select_rank(&sigmas, d_bar).map_err(to_py)
}

/// Benjamini–Yekutieli adjusted p-values, input order preserved.
#[pyfunction]
fn by_adjust(p_values: Vec<f64>) -> PyResult<Vec<f64>> {
    kroprofac::by_adjust(&p_values).map_err(to_py)
}

fn noise_spec(noise: &str, rho: f64, bandwidth: usize, seed: u64) -> PyResult<Option<NoiseModelSpec>> {
    Ok(Some(match noise {
        "none" => return Ok(None),
        "identity" => NoiseModelSpec::identity(),
        "ar1" => NoiseModelSpec::ar1(rho),
        "banded" => NoiseModelSpec::banded(bandwidth, seed),
        "t5" => NoiseModelSpec::heavy_tailed(),
        other => return Err(PyValueError::new_err(format!("unknown noise '{other}'"))),
    }))
}

/// Simulated data: returns `(x, y, nu_true)`.
#[pyfunction]
#[pyo3(signature = (dims, n, d=1, seed=0, noise="identity", rho=0.9, bandwidth=5))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    dims: PyDims,
    n: usize,
    d: usize,
    seed: u64,
    noise: &str,
    rho: f64,
    bandwidth: usize,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>)> {
    let spec = noise_spec(noise, rho, bandwidth, seed)?;
    let (data, truth) = gen_dataset(dims.0, d, n, spec, DatasetSeeds::for_replicate(seed, 0)).map_err(to_py)?;
    Ok((to_array(py, &data.x), to_array(py, &data.y), to_array(py, &truth.nu())))
}

/// Rank-one matrix-normal maximum likelihood fit; returns a dict with
/// `beta1`, `beta2`, `sigma1`, `sigma2`, `loglik_trace`, `converged`.
#[pyfunction]
#[pyo3(signature = (x, y, dims, max_iter=100, tol=1e-6))]
fn mle_fit<'py>(
    py: Python<'py>,
    x: PyReadonlyArray2<'_, f64>,
    y: PyReadonlyArray2<'_, f64>,
    dims: PyDims,
    max_iter: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = Dataset::new(dims.0, to_mat(&x), to_mat(&y)).map_err(to_py)?;
    let opts = MleOptions { max_iter, tol, fix_covariance: false };
    let s = mle_fit_core(&data, None, &opts).map_err(to_py)?;
    let out = PyDict::new_bound(py);
    out.set_item("beta1", to_array(py, &s.beta1))?;
    out.set_item("beta2", to_array(py, &s.beta2))?;
    out.set_item("sigma1", to_array(py, &s.sigma1))?;
    out.set_item("sigma2", to_array(py, &s.sigma2))?;
    out.set_item("loglik_trace", s.loglik_trace)?;
    out.set_item("converged", s.converged)?;
    Ok(out)
}

fn group(label: &str, a: &PyReadonlyArray3<'_, f64>) -> PyResult<GroupData> {
    let v = a.as_array();
    let (n, p1, p2) = v.dim();
    let samples = (0..n).map(|s| Mat::from_fn(p1, p2, |i, j| v[[s, i, j]])).collect();
    GroupData::new(label, samples).map_err(to_py)
}

/// Channel-wise two-group test on stacks of shape `(n, p1, p2)`; returns a
/// dict of per-channel lists.
#[pyfunction]
#[pyo3(signature = (group1, group2, d1=None, d2=None, alpha=0.05, ols_baseline=false))]
fn two_group<'py>(
    py: Python<'py>,
    group1: PyReadonlyArray3<'_, f64>,
    group2: PyReadonlyArray3<'_, f64>,
    d1: Option<usize>,
    d2: Option<usize>,
    alpha: f64,
    ols_baseline: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let (g1, g2) = (group("group1", &group1)?, group("group2", &group2)?);
    let opts = TwoGroupOptions { d1, d2, alpha, ols_baseline, ..Default::default() };
    let r = kroprofac::two_group_analysis(&g1, &g2, &opts).map_err(to_py)?;
    let out = PyDict::new_bound(py);
    out.set_item("theta_hat", r.theta_hat)?;
    out.set_item("t", r.t_stats)?;
    out.set_item("p", r.p_values)?;
    out.set_item("p_adjusted", r.p_adjusted)?;
    out.set_item("rejected", r.rejected)?;
    out.set_item("d", r.d_selected)?;
    Ok(out)
}

#[pymodule]
fn kroprofac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDims>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(factorize, m)?)?;
    m.add_function(wrap_pyfunction!(kron, m)?)?;
    m.add_function(wrap_pyfunction!(rearrange, m)?)?;
    m.add_function(wrap_pyfunction!(rearrange_inv, m)?)?;
    m.add_function(wrap_pyfunction!(select_rank, m)?)?;
    m.add_function(wrap_pyfunction!(by_adjust, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(mle_fit, m)?)?;
    m.add_function(wrap_pyfunction!(two_group, m)?)?;
    Ok(())
}
