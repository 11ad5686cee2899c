//! Python bindings: datasets, networks, training, certificates and the
//! experiment runner. Results with many fields cross the boundary as JSON.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use relu_dynamics::certificates as cert;
use relu_dynamics::cli::{self, runner, ExperimentConfig};
use relu_dynamics::datasets::{self, LabeledDataset};
use relu_dynamics::linalg;
use relu_dynamics::losses::LossFamily;
use relu_dynamics::models::{self, InitSpec, TrainedLayers, Variant};
use relu_dynamics::partition;
use relu_dynamics::prm::{self, TeacherStudentConfig};
use relu_dynamics::training::{self, LrSchedule, TrainConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn variant(key: &str) -> PyResult<Variant> {
    match key {
        "binary" => Ok(Variant::BinaryNoBias),
        "multi" => Ok(Variant::MultiBias),
        other => Err(PyValueError::new_err(format!("variant must be \"binary\" or \"multi\", got {other:?}"))),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| linalg::row_vec(m, i)).collect()
}

#[pyclass(name = "Dataset", module = "relu_dynamics_py", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Orthant-separable binary data on the unit sphere.
    #[staticmethod]
    #[pyo3(signature = (n, d, seed, include_antipodal = true))]
    fn orthant(n: usize, d: usize, seed: u64, include_antipodal: bool) -> PyResult<Self> {
        Ok(Self { inner: datasets::gen_orthant_separable(n, d, seed, include_antipodal).map_err(err)? })
    }

    /// Non-negative multi-class data.
    #[staticmethod]
    fn multiclass(n: usize, d: usize, classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: datasets::gen_nonnegative_multiclass(n, d, classes, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (images, labels, count, normalize = true))]
    fn mnist(images: &str, labels: &str, count: usize, normalize: bool) -> PyResult<Self> {
        Ok(Self { inner: datasets::load_mnist(images, labels, count, normalize).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, classes = None))]
    fn csv(path: &str, classes: Option<usize>) -> PyResult<Self> {
        Ok(Self { inner: datasets::read_csv(path, classes).map_err(err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn is_binary(&self) -> bool {
        self.inner.is_binary()
    }

    fn x(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.x)
    }

    /// ±1 labels for binary data, class indices otherwise.
    fn labels(&self) -> Vec<f64> {
        (0..self.inner.n())
            .map(|i| match self.inner.binary_labels() {
                Ok(y) => y[i],
                Err(_) => self.inner.class_of(i) as f64,
            })
            .collect()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Separability (binary) or concentration (multi-class) report as JSON.
    fn validate(&self) -> PyResult<String> {
        let r = if self.inner.is_binary() {
            datasets::validate_separable(&self.inner).map_err(err)?
        } else {
            datasets::validate_concentrated(&self.inner)
        };
        serde_json::to_string(&r).map_err(err)
    }

    /// Global-rate constants (γ1, γ2, V, ...) for width `m`, as JSON.
    fn constants(&self, m: f64, delta: f64) -> PyResult<String> {
        serde_json::to_string(&datasets::compute_v(&self.inner, m, delta).map_err(err)?).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={}, classes={})", self.inner.n(), self.inner.d(), self.inner.classes())
    }
}

#[pyclass(name = "Network", module = "relu_dynamics_py", from_py_object)]
#[derive(Clone)]
pub struct PyNetwork {
    inner: models::Network,
}

fn family(key: &str) -> PyResult<LossFamily> {
    LossFamily::from_key(key).map_err(err)
}

#[pymethods]
impl PyNetwork {
    /// Binary net without bias: a = ±1/√m, b ~ N(0, κ²/(md)).
    #[staticmethod]
    fn binary(m: usize, d: usize, kappa: f64, seed: u64) -> PyResult<Self> {
        let spec = InitSpec { kappa, seed, variant: Variant::BinaryNoBias };
        Ok(Self { inner: models::Network::Binary(models::init_binary(m, d, &spec).map_err(err)?) })
    }

    /// Multi-output net with bias.
    #[staticmethod]
    fn multi(m: usize, d: usize, classes: usize, kappa: f64, seed: u64) -> PyResult<Self> {
        let spec = InitSpec { kappa, seed, variant: Variant::MultiBias };
        Ok(Self { inner: models::Network::Multi(models::init_multi(m, d, classes, &spec).map_err(err)?) })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn with_params(&self, p: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_params(&p).map_err(err)? })
    }

    /// n×C outputs.
    fn forward(&self, ds: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.forward_dataset(&ds.inner).map_err(err)?.out))
    }

    fn loss(&self, ds: &PyDataset, loss: &str) -> PyResult<f64> {
        models::loss_value(&self.inner, &ds.inner, &family(loss)?).map_err(err)
    }

    #[pyo3(signature = (ds, loss, input_only = false))]
    fn gradient(&self, ds: &PyDataset, loss: &str, input_only: bool) -> PyResult<Vec<f64>> {
        let layers = if input_only { TrainedLayers::InputOnly } else { TrainedLayers::All };
        Ok(models::evaluate(&self.inner, &ds.inner, &family(loss)?, None, layers).map_err(err)?.grad)
    }

    fn gram(&self, ds: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&cert::gram_matrix(&self.inner, &ds.inner).map_err(err)?))
    }

    fn hessian_norm(&self, ds: &PyDataset, loss: &str) -> PyResult<f64> {
        let h = models::hessian_loss(&self.inner, &ds.inner, &family(loss)?, TrainedLayers::All).map_err(err)?;
        Ok(linalg::spectral_norm_sym(&h))
    }

    /// |TL|, |TD|, |FL|, |FD| per sample.
    fn partition_counts(&self, ds: &PyDataset) -> PyResult<Vec<[usize; 4]>> {
        let snap = partition::compute_partition(&self.inner, &ds.inner, 0).map_err(err)?;
        Ok((0..ds.inner.n()).map(|i| snap.counts(i)).collect())
    }

    /// Full-batch GD with a constant step; returns the trained net and the
    /// loss at t = 0, ..., steps.
    fn train(&self, ds: &PyDataset, loss: &str, eta: f64, steps: usize) -> PyResult<(PyNetwork, Vec<f64>)> {
        let (rec, net) = training::run(&self.inner, &ds.inner, &family(loss)?, &LrSchedule::Constant { eta }, &TrainConfig::full(steps))
            .map_err(err)?;
        Ok((PyNetwork { inner: net }, rec.steps.iter().map(|s| s.loss).collect()))
    }

    fn __repr__(&self) -> String {
        format!("Network({:?}, m={}, d={}, outputs={})", self.inner.variant(), self.inner.m(), self.inner.d(), self.inner.outputs())
    }
}

/// ⌊ln6/(4η)⌋ for "binary", ⌊ln4/(4η)⌋ for "multi".
#[pyfunction]
fn tstar(eta: f64, kind: &str) -> PyResult<u64> {
    Ok(training::tstar(eta, variant(kind)?))
}

#[pyfunction]
fn lemma_a9_sum(eta: f64, t_star: u64) -> f64 {
    cert::lemma_a9_sum(eta, t_star)
}

#[pyfunction]
fn descent_bound_multiclass() -> f64 {
    cert::descent_bound_theorem2()
}

#[pyfunction]
fn descent_bound_binary(gamma1: f64, gamma2: f64, n: usize, m: f64, delta: f64) -> f64 {
    cert::descent_bound_theorem1(gamma1, gamma2, n, m, delta)
}

fn prm_cfg(d: usize, m: usize, big_m: usize, kappa: f64) -> TeacherStudentConfig {
    TeacherStudentConfig { d, m, big_m, kappa, eta: prm::eta_bound(d, m, big_m, kappa), seed: 0, steps: 1 }
}

#[pyfunction]
fn prm_eta_bound(d: usize, m: usize, big_m: usize, kappa: f64) -> f64 {
    prm::eta_bound(d, m, big_m, kappa)
}

/// Population loss of student rows `w` against the teacher of (d, M).
#[pyfunction]
fn prm_population_loss(w: Vec<Vec<f64>>, d: usize, big_m: usize) -> PyResult<f64> {
    let m = w.len();
    if w.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("every student row needs d entries"));
    }
    let wm = DMatrix::from_fn(m, d, |i, j| w[i][j]);
    prm::population_loss(&wm, &prm_cfg(d, m.max(1), big_m, 0.1)).map_err(err)
}

#[pyfunction]
fn arccos_kernel(w: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    prm::arccos_kernel(&w, &v).map_err(err)
}

/// Runs an experiment config (JSON text); returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out = None))]
fn run_experiment(py: Python<'_>, config_json: &str, out: Option<&str>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let o = py.detach(|| runner::run_experiment(&cfg, out.map(std::path::Path::new))).map_err(err)?;
    serde_json::to_string(&o.summary).map_err(err)
}

/// Re-runs a stored run; returns (steps digest matches, certificates digest matches).
#[pyfunction]
fn verify(py: Python<'_>, run_dir: &str) -> PyResult<(bool, bool)> {
    let v = py.detach(|| cli::cmd_verify(std::path::Path::new(run_dir), None)).map_err(err)?;
    Ok((v.steps_match, v.certificates_match))
}

#[pymodule]
fn relu_dynamics_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(tstar, m)?)?;
    m.add_function(wrap_pyfunction!(lemma_a9_sum, m)?)?;
    m.add_function(wrap_pyfunction!(descent_bound_multiclass, m)?)?;
    m.add_function(wrap_pyfunction!(descent_bound_binary, m)?)?;
    m.add_function(wrap_pyfunction!(prm_eta_bound, m)?)?;
    m.add_function(wrap_pyfunction!(prm_population_loss, m)?)?;
    m.add_function(wrap_pyfunction!(arccos_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
