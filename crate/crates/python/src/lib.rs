//! Python bindings for `hdrisk`.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hdrisk::amp::{amp_run as run_amp, check_fixed_point, AmpOptions, TauSchedule};
use hdrisk::datagen::{self, BetaPrior, Noise, SyntheticSpec};
use hdrisk::diagnostics;
use hdrisk::experiments::{self, ExperimentConfig, ExperimentKind};
use hdrisk::risk::{self, CurvatureProfile, ReportOptions};

fn to_py(e: hdrisk::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("ragged design matrix"));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A convex scalar family parsed from a spec such as `pseudo_huber:mu=1`.
#[pyclass(frozen, skip_from_py_object, module = "hdrisk_py")]
#[derive(Clone)]
struct Family(hdrisk::ScalarFamily);

#[pymethods]
impl Family {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        spec.parse().map(Family).map_err(to_py)
    }

    fn value(&self, x: f64) -> f64 {
        self.0.value(x)
    }

    fn d1(&self, x: f64) -> f64 {
        self.0.d1(x)
    }

    fn d2(&self, x: f64) -> f64 {
        self.0.d2(x)
    }

    fn prox(&self, x: f64, scale: f64) -> f64 {
        self.0.prox(x, scale)
    }

    fn prox_derivative(&self, x: f64, scale: f64) -> f64 {
        self.0.prox_derivative(x, scale)
    }

    /// `(psi, dpsi/dz)` with `psi(z, theta) = z - prox(z, theta)`.
    fn psi(&self, z: f64, theta: f64) -> (f64, f64) {
        self.0.psi(z, theta)
    }

    #[getter]
    fn curvature_lower(&self) -> f64 {
        self.0.curvature_lower()
    }

    fn __repr__(&self) -> String {
        format!("Family('{}')", self.0)
    }
}

#[pyclass(frozen, skip_from_py_object, module = "hdrisk_py")]
#[derive(Clone)]
struct Dataset(hdrisk::Dataset);

#[pymethods]
impl Dataset {
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        hdrisk::Dataset::new(matrix(&x)?, DVector::from_vec(y)).map(Dataset).map_err(to_py)
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        hdrisk::Dataset::load_csv(path).map(Dataset).map_err(to_py)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| to_py(e.into()))?;
        self.0.write_csv(f).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.0.p()
    }

    #[getter]
    fn aspect_ratio(&self) -> f64 {
        self.0.aspect_ratio()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(self.0.x())
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.0.y().as_slice().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, p={})", self.0.n(), self.0.p())
    }
}

#[pyclass(frozen, module = "hdrisk_py")]
struct Fit(hdrisk::FitResult);

#[pymethods]
impl Fit {
    #[getter]
    fn beta_hat(&self) -> Vec<f64> {
        self.0.beta_hat.as_slice().to_vec()
    }

    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.0.residuals.as_slice().to_vec()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.0.objective
    }

    #[getter]
    fn grad_inf_norm(&self) -> f64 {
        self.0.grad_inf_norm
    }
}

/// Penalized regression `sum_i loss(y_i - x_i' beta) + lam * sum_j reg(beta_j)`.
#[pyclass(frozen, skip_from_py_object, module = "hdrisk_py")]
#[derive(Clone)]
struct Model(hdrisk::PenalizedModel);

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (loss, reg, lam))]
    fn new(loss: &str, reg: &str, lam: f64) -> PyResult<Self> {
        let l = loss.parse().map_err(to_py)?;
        let r = reg.parse().map_err(to_py)?;
        hdrisk::PenalizedModel::new(l, r, lam).map(Model).map_err(to_py)
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.0.lambda()
    }

    fn objective(&self, data: &Dataset, beta: Vec<f64>) -> PyResult<f64> {
        self.0.objective(&data.0, &DVector::from_vec(beta)).map_err(to_py)
    }

    fn fit(&self, py: Python<'_>, data: &Dataset) -> PyResult<Fit> {
        let cfg = hdrisk::SolverConfig::default();
        py.detach(|| hdrisk::fit(&self.0, &data.0, None, &cfg)).map(Fit).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model('{}', '{}', {})", self.0.loss(), self.0.regularizer(), self.0.lambda())
    }
}

fn full_fit(model: &Model, data: &Dataset) -> PyResult<hdrisk::FitResult> {
    hdrisk::fit(&model.0, &data.0, None, &hdrisk::SolverConfig::default()).map_err(to_py)
}

#[pyfunction]
fn loocv_risk(model: &Model, data: &Dataset) -> PyResult<f64> {
    let cfg = hdrisk::SolverConfig::default();
    let f = full_fit(model, data)?;
    risk::loocv_risk_from_fit(&model.0, &data.0, &f, &cfg).map(|r| r.risk).map_err(to_py)
}

#[pyfunction]
fn alo_risk(model: &Model, data: &Dataset) -> PyResult<f64> {
    let f = full_fit(model, data)?;
    risk::alo_risk(&model.0, &data.0, &f).map(|r| r.risk).map_err(to_py)
}

/// `(risk, tau_hat, theta_hat)`.
#[pyfunction]
fn amp_risk(model: &Model, data: &Dataset) -> PyResult<(f64, f64, f64)> {
    let f = full_fit(model, data)?;
    let r = risk::amp_risk(&model.0, &data.0, &f, data.0.aspect_ratio()).map_err(to_py)?;
    Ok((r.risk, r.tau_hat, r.theta_hat))
}

#[pyfunction]
#[pyo3(signature = (model, data, k, seed = 0))]
fn kfold_risk(model: &Model, data: &Dataset, k: usize, seed: u64) -> PyResult<f64> {
    risk::kfold_risk(&model.0, &data.0, k, seed, &hdrisk::SolverConfig::default()).map_err(to_py)
}

/// Every estimate as a dict keyed like the CLI's CSV header.
#[pyfunction]
#[pyo3(signature = (model, data, folds = vec![2, 3, 5], seed = 0))]
fn risk_report<'py>(py: Python<'py>, model: &Model, data: &Dataset, folds: Vec<usize>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let opts = ReportOptions { folds, kfold_seed: seed, ..ReportOptions::default() };
    let cfg = hdrisk::SolverConfig::default();
    let r = py.detach(|| risk::risk_report(&model.0, &data.0, &opts, &cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("lo", r.lo)?;
    d.set_item("alo", r.alo)?;
    d.set_item("amp", r.amp)?;
    for (k, v) in &r.kfold {
        d.set_item(format!("kfold{k}"), v)?;
    }
    d.set_item("tau_hat", r.tau_hat)?;
    d.set_item("theta_hat", r.theta_hat)?;
    Ok(d)
}

/// `(tau_hat, theta_hat)` from loss and regularizer curvatures.
#[pyfunction]
fn calibrate(loss_curvatures: Vec<f64>, reg_curvatures: Vec<f64>, lam: f64, delta: f64) -> PyResult<(f64, f64)> {
    let c = CurvatureProfile::new(loss_curvatures, reg_curvatures, lam, delta).and_then(|p| p.calibrate()).map_err(to_py)?;
    Ok((c.tau_hat, c.theta_hat))
}

/// Runs AMP at constant `tau` (the calibrated value when omitted).
#[pyfunction]
#[pyo3(signature = (model, data, tau = None, max_iter = 1000, tol = 1e-10, damping = 0.0))]
fn amp_run<'py>(
    py: Python<'py>,
    model: &Model,
    data: &Dataset,
    tau: Option<f64>,
    max_iter: usize,
    tol: f64,
    damping: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let delta = data.0.aspect_ratio();
    let tau = match tau {
        Some(t) => t,
        None => {
            let f = full_fit(model, data)?;
            CurvatureProfile::at_fit(&model.0, &f, delta).and_then(|c| c.calibrate()).map_err(to_py)?.tau_hat
        }
    };
    let opts = AmpOptions { max_iter, tol, damping };
    let run = run_amp(&model.0, &data.0, &TauSchedule::Constant(tau), None, &opts).map_err(to_py)?;
    let res = check_fixed_point(&run.state, &model.0, &data.0, delta).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("beta", run.state.beta.as_slice().to_vec())?;
    d.set_item("z", run.state.z.as_slice().to_vec())?;
    d.set_item("theta", run.state.theta)?;
    d.set_item("tau", tau)?;
    d.set_item("iterations", run.trace.len())?;
    d.set_item("delta_beta_inf", run.trace.iter().map(|r| r.delta_beta_inf).collect::<Vec<_>>())?;
    d.set_item("fixed_point_residual", res.max())?;
    Ok(d)
}

/// Gaussian design with `x_ij ~ N(0, 1/n)`; returns `(dataset, beta_star)`.
#[pyfunction]
#[pyo3(signature = (n, p, seed = 0, beta_var = 4.0, noise_sd = 1.0))]
fn generate(n: usize, p: usize, seed: u64, beta_var: f64, noise_sd: f64) -> PyResult<(Dataset, Vec<f64>)> {
    let spec = SyntheticSpec { n, p, beta_prior: BetaPrior::Gaussian { variance: beta_var }, noise: Noise::Gaussian { sd: noise_sd }, seed };
    let s = datagen::generate(&spec).map_err(to_py)?;
    Ok((Dataset(s.data), s.beta_star.as_slice().to_vec()))
}

/// `(sigma_min, sigma_max, sigma_delta_bound)` for the eigenvalues of `X'X`.
#[pyfunction]
fn spectrum_check(x: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let s = diagnostics::spectrum_check(&matrix(&x)?).map_err(to_py)?;
    Ok((s.sigma_min, s.sigma_max, s.sigma_delta_bound))
}

#[pyfunction]
fn sup_loo_linearization_error(model: &Model, data: &Dataset) -> PyResult<f64> {
    diagnostics::sup_loo_linearization_error(&model.0, &data.0, &hdrisk::SolverConfig::default()).map_err(to_py)
}

/// Runs a named experiment with optional `key = value` overrides and returns
/// the written file paths.
#[pyfunction]
#[pyo3(signature = (name, output_dir, overrides = None))]
fn run_experiment(py: Python<'_>, name: &str, output_dir: PathBuf, overrides: Option<Vec<(String, String)>>) -> PyResult<Vec<PathBuf>> {
    let kind: ExperimentKind = name.parse().map_err(to_py)?;
    let mut cfg = ExperimentConfig::defaults(kind);
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(to_py)?;
    }
    cfg.output_dir = output_dir;
    py.detach(|| experiments::run_experiment(&cfg)).map_err(to_py)
}

#[pymodule]
fn hdrisk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Family>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(loocv_risk, m)?)?;
    m.add_function(wrap_pyfunction!(alo_risk, m)?)?;
    m.add_function(wrap_pyfunction!(amp_risk, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_risk, m)?)?;
    m.add_function(wrap_pyfunction!(risk_report, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(amp_run, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum_check, m)?)?;
    m.add_function(wrap_pyfunction!(sup_loo_linearization_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
