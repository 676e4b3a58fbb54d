//! Python bindings. Matrices cross the boundary as lists of row lists.

use aminokernel::cluster::HeightKind;
use aminokernel::ingest::MarkerConvention;
use aminokernel::regression::{solve_rls, LooSolver};
use aminokernel::substitution::pd_report as table_pd_report;
use aminokernel::{AminoChain, Error, ErrorClass};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Numeric => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn chain(s: &str) -> PyResult<AminoChain> {
    AminoChain::parse(s).map_err(to_py)
}

fn chains(seqs: &[String]) -> PyResult<Vec<AminoChain>> {
    seqs.iter().map(|s| chain(s)).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Symbol order of every table and marginal.
#[pyfunction]
fn alphabet() -> String {
    String::from_utf8_lossy(aminokernel::chain::AMINO_SYMBOLS).into_owned()
}

/// BLOSUM62-2 raised entrywise to `beta`.
#[pyfunction]
#[pyo3(signature = (beta=1.0))]
fn blosum62(beta: f64) -> PyResult<Vec<Vec<f64>>> {
    let k = aminokernel::load_blosum62_2()
        .hadamard_power(beta)
        .map_err(to_py)?;
    Ok(rows(k.values()))
}

#[pyfunction]
fn marginal() -> PyResult<Vec<f64>> {
    let p = aminokernel::load_blosum62_2().marginal().map_err(to_py)?;
    Ok(p.p.iter().copied().collect())
}

#[pyfunction]
fn pd_report<'py>(py: Python<'py>, table: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let r = table_pd_report(&matrix(&table)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("min_eigenvalue", r.min_eigenvalue)?;
    d.set_item("log_min_eigenvalue", r.log_min_eigenvalue)?;
    d.set_item("conditionally_pd", r.conditionally_pd)?;
    Ok(d)
}

#[pyclass(name = "StringKernel", frozen)]
struct PyStringKernel {
    inner: aminokernel::StringKernel,
}

#[pymethods]
impl PyStringKernel {
    #[new]
    #[pyo3(signature = (beta=0.11387, k_max=None, averaged=false))]
    fn new(beta: f64, k_max: Option<usize>, averaged: bool) -> PyResult<Self> {
        let params = aminokernel::KernelParams::new(beta)
            .and_then(|p| p.with_k_max(k_max))
            .map_err(to_py)?
            .with_averaged(averaged);
        let inner = aminokernel::StringKernel::blosum(params).map_err(to_py)?;
        Ok(PyStringKernel { inner })
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.params().beta
    }

    fn k3(&self, f: &str, g: &str) -> PyResult<f64> {
        Ok(self.inner.k3(&chain(f)?, &chain(g)?))
    }

    fn ln_k3(&self, f: &str, g: &str) -> PyResult<f64> {
        Ok(self.inner.ln_k3(&chain(f)?, &chain(g)?))
    }

    fn k3_hat(&self, f: &str, g: &str) -> PyResult<f64> {
        Ok(self.inner.k3_hat(&chain(f)?, &chain(g)?))
    }

    fn dist_rkhs(&self, f: &str, g: &str) -> PyResult<f64> {
        Ok(self.inner.dist_rkhs(&chain(f)?, &chain(g)?))
    }

    /// Normalized Gram matrix over `seqs`.
    fn gram(&self, py: Python<'_>, seqs: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let cs = chains(&seqs)?;
        Ok(py.detach(|| rows(&self.inner.gram_values(&cs))))
    }

    /// Normalized kernel between each query and each reference.
    fn cross(
        &self,
        py: Python<'_>,
        queries: Vec<String>,
        refs: Vec<String>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let (q, r) = (chains(&queries)?, chains(&refs)?);
        Ok(py.detach(|| rows(&self.inner.cross_values(&q, &r))))
    }

    fn __repr__(&self) -> String {
        let p = self.inner.params();
        format!(
            "StringKernel(beta={}, k_max={:?}, averaged={})",
            p.beta, p.k_max, p.averaged
        )
    }
}

#[pyfunction]
#[pyo3(signature = (ic50, base=50000.0))]
fn normalize_ic50(ic50: f64, base: f64) -> PyResult<f64> {
    aminokernel::normalize_ic50(ic50, base).map_err(to_py)
}

#[pyfunction]
fn rmse(pred: Vec<f64>, obs: Vec<f64>) -> PyResult<f64> {
    aminokernel::rmse(&pred, &obs).map_err(to_py)
}

#[pyfunction]
fn auc(pred: Vec<f64>, obs: Vec<f64>, theta: f64) -> PyResult<f64> {
    aminokernel::auc(&pred, &obs, theta).map_err(to_py)
}

/// RLS coefficients for a training kernel, per-sample regularizer `lam`.
#[pyfunction]
fn fit_rls(kernel: Vec<Vec<f64>>, labels: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let c = solve_rls(&matrix(&kernel)?, &labels, lam).map_err(to_py)?;
    Ok(c.iter().copied().collect())
}

/// Predictions from kernel rows (query x training) and coefficients.
#[pyfunction]
fn predict_rls(rows: Vec<Vec<f64>>, coefficients: Vec<f64>) -> PyResult<Vec<f64>> {
    let k = matrix(&rows)?;
    if k.ncols() != coefficients.len() && !rows.is_empty() {
        return Err(to_py(Error::LengthMismatch(k.ncols(), coefficients.len())));
    }
    let c = nalgebra::DVector::from_vec(coefficients);
    Ok((k * c).iter().copied().collect())
}

/// Leave-one-out residuals; NaN where the leverage is numerically one.
#[pyfunction]
fn loo_residuals(kernel: Vec<Vec<f64>>, labels: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let solver = LooSolver::new(matrix(&kernel)?, &labels).map_err(to_py)?;
    Ok(solver.residuals(lam).map_err(to_py)?.residuals)
}

#[pyfunction]
#[pyo3(signature = (n, gamma=0.1))]
fn owa_weights(n: usize, gamma: f64) -> Vec<f64> {
    aminokernel::owa_weights(n, gamma)
}

#[pyclass(name = "ClusterTree", frozen)]
struct PyClusterTree {
    inner: aminokernel::ClusterTree,
}

#[pymethods]
impl PyClusterTree {
    #[getter]
    fn leaves(&self) -> Vec<String> {
        self.inner.leaves.clone()
    }

    /// `(left, right, height, diameter)` per merge; node ids past the leaf
    /// count refer to earlier merges.
    #[getter]
    fn merges(&self) -> Vec<(usize, usize, f64, f64)> {
        self.inner
            .merges
            .iter()
            .map(|m| (m.left, m.right, m.height, m.diameter))
            .collect()
    }

    /// Leaf indices of each of the `k` clusters.
    fn cut(&self, k: usize) -> PyResult<Vec<Vec<usize>>> {
        self.inner.cut(k).map_err(to_py)
    }

    #[pyo3(signature = (heights="linkage"))]
    fn newick(&self, heights: &str) -> PyResult<String> {
        let kind = match heights {
            "linkage" => HeightKind::Linkage,
            "diameter" => HeightKind::Diameter,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown height kind {other}"
                )))
            }
        };
        Ok(self.inner.to_newick(kind))
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = aminokernel::ClusterTree::from_json(text).map_err(to_py)?;
        Ok(PyClusterTree { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.leaves.len()
    }
}

/// OWA-linkage agglomerative clustering of a distance matrix.
#[pyfunction]
#[pyo3(signature = (ids, distances, gamma=0.1))]
fn cluster(
    py: Python<'_>,
    ids: Vec<String>,
    distances: Vec<Vec<f64>>,
    gamma: f64,
) -> PyResult<PyClusterTree> {
    let d = aminokernel::DistanceMatrix::new(ids, matrix(&distances)?).map_err(to_py)?;
    let params = aminokernel::OwaParams::new(gamma).map_err(to_py)?;
    let inner = py
        .detach(|| aminokernel::agglomerate(&d, &params))
        .map_err(to_py)?;
    Ok(PyClusterTree { inner })
}

/// Allele sequence cut to the conserved start/end markers.
#[pyfunction]
#[pyo3(signature = (seq, convention="inclusive"))]
fn normal_form(seq: &str, convention: &str) -> PyResult<String> {
    let conv: MarkerConvention = convention.parse().map_err(to_py)?;
    aminokernel::normal_form(seq, conv)
        .map(|nf| nf.chain.as_str().to_string())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pyaminokernel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyStringKernel>()?;
    m.add_class::<PyClusterTree>()?;
    m.add_function(wrap_pyfunction!(alphabet, m)?)?;
    m.add_function(wrap_pyfunction!(blosum62, m)?)?;
    m.add_function(wrap_pyfunction!(marginal, m)?)?;
    m.add_function(wrap_pyfunction!(pd_report, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_ic50, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rls, m)?)?;
    m.add_function(wrap_pyfunction!(predict_rls, m)?)?;
    m.add_function(wrap_pyfunction!(loo_residuals, m)?)?;
    m.add_function(wrap_pyfunction!(owa_weights, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(normal_form, m)?)?;
    Ok(())
}
