//! Python bindings for `conquer`.
//!
//! Arrays cross the boundary as nested lists of floats, and structured
//! results as plain dicts. Every library error is raised as
//! `conquer_py.ConquerError` with the error kind prefixed to the message.

use std::path::PathBuf;

use conquer::cli::{self, CommandKind, ExperimentConfig};
use conquer::evaluation::{self, Method};
use conquer::trainer::{self, FittedQuantileModel, TrainConfig};
use conquer::{Architecture, Dataset, KernelKind, LossSpec, MlpModel, NoiseLaw, Rng, Scenario};
use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyType;

create_exception!(conquer_py, ConquerError, PyValueError);

fn err(e: conquer::Error) -> PyErr {
    ConquerError::new_err(format!("{}: {e}", e.kind()))
}

fn parse<T: std::str::FromStr<Err = conquer::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Row-major nested lists to a matrix; every row must have `cols` entries.
pub fn to_matrix(rows: &[Vec<f64>], cols: Option<usize>) -> conquer::Result<Array2<f64>> {
    let d = cols.or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(conquer::Error::Shape(format!("row {i} has {} columns, expected {d}", r.len())));
    }
    Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

pub fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

/// Check loss `ρ_τ(u)`.
#[pyfunction]
fn check_loss(u: f64, tau: f64) -> f64 {
    conquer::losses::pinball(u, tau)
}

/// Smoothed check loss `ℓ_h(u)`.
#[pyfunction]
#[pyo3(signature = (u, tau, kernel="gaussian", bandwidth=0.1))]
fn smoothed_loss(u: f64, tau: f64, kernel: &str, bandwidth: f64) -> PyResult<f64> {
    let spec = LossSpec::smoothed(tau, parse(kernel)?, bandwidth).map_err(err)?;
    conquer::losses::smoothed_loss(u, &spec).map_err(err)
}

/// Derivative of the smoothed check loss in `u`.
#[pyfunction]
#[pyo3(signature = (u, tau, kernel="gaussian", bandwidth=0.1))]
fn smoothed_grad(u: f64, tau: f64, kernel: &str, bandwidth: f64) -> PyResult<f64> {
    let spec = LossSpec::smoothed(tau, parse(kernel)?, bandwidth).map_err(err)?;
    conquer::losses::smoothed_grad(u, &spec).map_err(err)
}

/// CDF of a standardized smoothing kernel.
#[pyfunction]
fn kernel_cdf(kernel: &str, t: f64) -> PyResult<f64> {
    Ok(parse::<KernelKind>(kernel)?.cdf(t))
}

/// Bandwidth used when none is given, keyed on the training-set size.
#[pyfunction]
fn default_bandwidth(n: usize) -> f64 {
    cli::default_bandwidth(n)
}

/// Least-squares fit of `log mse` on `log n`; returns `(slope, intercept, r_squared)`.
#[pyfunction]
fn rate_fit(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = evaluation::rate_fit(&points).map_err(err)?;
    Ok((f.slope, f.intercept, f.r_squared))
}

#[pyclass(name = "NoiseLaw", module = "conquer_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNoiseLaw(NoiseLaw);

#[pymethods]
impl PyNoiseLaw {
    #[classmethod]
    fn normal(_cls: &Bound<'_, PyType>) -> Self {
        Self(NoiseLaw::StdNormal)
    }

    #[classmethod]
    fn uniform(_cls: &Bound<'_, PyType>) -> Self {
        Self(NoiseLaw::Uniform01)
    }

    #[classmethod]
    fn student_t(_cls: &Bound<'_, PyType>, dof: u32) -> PyResult<Self> {
        NoiseLaw::student_t(dof).map(Self).map_err(err)
    }

    #[classmethod]
    fn laplace(_cls: &Bound<'_, PyType>, scale: f64) -> PyResult<Self> {
        NoiseLaw::laplace(scale).map(Self).map_err(err)
    }

    fn cdf(&self, x: f64) -> PyResult<f64> {
        self.0.cdf(x).map_err(err)
    }

    fn quantile(&self, p: f64) -> PyResult<f64> {
        self.0.quantile(p).map_err(err)
    }

    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        self.0.sample(&mut Rng::new(seed), n).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("NoiseLaw({:?})", self.0)
    }
}

#[pyclass(name = "Dataset", module = "conquer_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Self> {
        let x = to_matrix(&x, None).map_err(err)?;
        Dataset::new(x, Array1::from(y), "python").map(Self).map_err(err)
    }

    /// Simulated draw from scenario `S1`, `S2` or `S3`.
    #[classmethod]
    #[pyo3(signature = (scenario, n, seed=0))]
    fn generate(_cls: &Bound<'_, PyType>, scenario: &str, n: usize, seed: u64) -> PyResult<Self> {
        parse::<Scenario>(scenario)?.generate(n, seed).map(Self).map_err(err)
    }

    #[classmethod]
    #[pyo3(signature = (path, features, target))]
    fn load_csv(_cls: &Bound<'_, PyType>, path: PathBuf, features: Vec<String>, target: &str) -> PyResult<Self> {
        conquer::scenarios::load_csv(&path, &features, target, None)
            .map(|(d, _)| Self(d))
            .map_err(err)
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.x)
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.0.y.to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_csv(&path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={})", self.0.len(), self.0.dim())
    }
}

/// True conditional `τ`-quantile of a scenario at each row of `x`.
#[pyfunction]
fn true_quantiles(scenario: &str, x: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<f64>> {
    let s: Scenario = parse(scenario)?;
    let x = to_matrix(&x, Some(s.dim())).map_err(err)?;
    s.true_quantiles(&x, tau).map_err(err)
}

#[pyclass(name = "Model", module = "conquer_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(MlpModel);

#[pymethods]
impl PyModel {
    /// Freshly initialized ReLU network.
    #[new]
    #[pyo3(signature = (input_dim, widths, outputs=1, residual=false, seed=0))]
    fn new(input_dim: usize, widths: Vec<usize>, outputs: usize, residual: bool, seed: u64) -> PyResult<Self> {
        let arch = Architecture::new(input_dim, widths, outputs).with_residual(residual);
        MlpModel::init(&arch, &mut Rng::new(seed)).map(Self).map_err(err)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(&x, Some(self.0.architecture().input_dim)).map_err(err)?;
        self.0.predict(x.view()).map(|p| to_rows(&p)).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn architecture(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let v = serde_json::to_value(self.0.architecture()).map_err(|e| err(e.into()))?;
        to_py(py, &v)
    }

    /// All parameters, flattened layer by layer (weights then biases).
    fn params(&self) -> Vec<f64> {
        self.0.params().iter().collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[classmethod]
    fn from_json(_cls: &Bound<'_, PyType>, text: &str) -> PyResult<Self> {
        MlpModel::from_json(text).map(Self).map_err(err)
    }

    /// `.json` paths are written as JSON, anything else in the binary format.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[classmethod]
    fn load(_cls: &Bound<'_, PyType>, path: PathBuf) -> PyResult<Self> {
        MlpModel::load(&path).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        let a = self.0.architecture();
        format!(
            "Model(input_dim={}, widths={:?}, outputs={}, residual={})",
            a.input_dim, a.hidden_widths, a.n_outputs, a.residual
        )
    }
}

#[pyclass(name = "FittedModel", module = "conquer_py", frozen, skip_from_py_object)]
struct PyFitted(FittedQuantileModel);

#[pymethods]
impl PyFitted {
    /// Predicted quantiles, one column per level.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let d = self.0.models[0].architecture().input_dim;
        let x = to_matrix(&x, Some(d)).map_err(err)?;
        self.0.predict(x.view()).map(|p| to_rows(&p)).map_err(err)
    }

    fn objective(&self, data: &PyDataset) -> PyResult<f64> {
        self.0.objective(&data.0).map_err(err)
    }

    #[getter]
    fn taus(&self) -> Vec<f64> {
        self.0.taus()
    }

    #[getter]
    fn joint(&self) -> bool {
        self.0.joint
    }

    #[getter]
    fn epochs_run(&self) -> usize {
        self.0.epochs_run()
    }

    #[getter]
    fn models(&self) -> Vec<PyModel> {
        self.0.models.iter().cloned().map(PyModel).collect()
    }

    /// One dict per epoch: `epoch`, `train_loss`, `val_loss`, `lr`.
    #[getter]
    fn history(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let v = serde_json::to_value(&self.0.history).map_err(|e| err(e.into()))?;
        to_py(py, &v)
    }

    fn __repr__(&self) -> String {
        format!("FittedModel(taus={:?}, joint={}, epochs={})", self.0.taus(), self.0.joint, self.0.epochs_run())
    }
}

pub struct FitRequest {
    pub taus: Vec<f64>,
    pub widths: Vec<usize>,
    pub method: Method,
    pub bandwidth: Option<f64>,
    pub residual: bool,
    pub joint: bool,
    pub config: TrainConfig,
    pub seed: u64,
}

/// Joint requests fit one network over all levels; otherwise each level
/// gets its own model, and with several levels the fitted models are merged
/// column-wise.
pub fn fit(data: &Dataset, req: &FitRequest) -> conquer::Result<FittedQuantileModel> {
    if req.taus.is_empty() {
        return Err(conquer::Error::InvalidArgument("taus must not be empty".into()));
    }
    let h = match (req.method, req.bandwidth) {
        (Method::Baseline, h) => h,
        (_, Some(h)) => Some(h),
        (_, None) => Some(cli::default_bandwidth(data.len())),
    };
    let arch = Architecture::new(data.dim(), req.widths.clone(), 1).with_residual(req.residual);
    if req.joint {
        let outputs = match req.config.heads {
            trainer::HeadLayout::Shared => req.taus.len(),
            trainer::HeadLayout::Separate => 1,
        };
        let family = req.method.loss(req.taus[0], h)?;
        return trainer::train_noncrossing(data, &arch.with_outputs(outputs), &req.taus, &family, &req.config, req.seed);
    }
    let mut merged: Option<FittedQuantileModel> = None;
    for &tau in &req.taus {
        let f = trainer::train_single(data, &arch, &req.method.loss(tau, h)?, &req.config, req.seed)?;
        merged = Some(match merged {
            None => f,
            Some(mut m) => {
                m.models.extend(f.models);
                m.losses.extend(f.losses);
                m.history.clear();
                m
            }
        });
    }
    Ok(merged.unwrap())
}

/// Trains quantile networks on `data`.
///
/// `method` is `baseline` (raw check loss) or a kernel name. A smoothed
/// method without `bandwidth` uses `default_bandwidth(len(data))`. Early
/// stopping defaults to on for smoothed methods and off for the baseline.
/// With several separate levels the returned history is empty.
#[pyfunction]
#[pyo3(signature = (
    data, taus, widths=vec![70; 5], method="gaussian", bandwidth=None, residual=false, joint=false,
    epochs=100, batch_size=128, lr=0.1, early_stop=None, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &PyDataset,
    taus: Vec<f64>,
    widths: Vec<usize>,
    method: &str,
    bandwidth: Option<f64>,
    residual: bool,
    joint: bool,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    early_stop: Option<bool>,
    seed: u64,
) -> PyResult<PyFitted> {
    let method: Method = parse(method)?;
    let mut config = TrainConfig { max_epochs: epochs, batch_size, lr, ..TrainConfig::default() };
    if !early_stop.unwrap_or(method != Method::Baseline) {
        config.early_stop = None;
    }
    let req = FitRequest { taus, widths, method, bandwidth, residual, joint, config, seed };
    let data = data.0.clone();
    py.detach(move || fit(&data, &req)).map(PyFitted).map_err(err)
}

fn experiment(config: &Bound<'_, PyAny>) -> PyResult<ExperimentConfig> {
    serde_json::from_value(from_py(config)?).map_err(|e| err(e.into()))
}

/// Runs the benchmark protocol for one sample size without touching disk.
///
/// `config` takes the same keys as the CLI's JSON config. Returns the trial
/// report: per-trial records plus per-level aggregates.
#[pyfunction]
fn run_trials(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let cfg = experiment(config)?.resolve(CommandKind::Bench).map_err(err)?;
    let report = py
        .detach(move || {
            let spec = cfg.experiment_spec(cfg.n)?;
            evaluation::run_trials(&spec, cfg.n_trials, cfg.seed, cfg.workers)
        })
        .map_err(err)?;
    to_py(py, &serde_json::to_value(&report).map_err(|e| err(e.into()))?)
}

/// Runs a CLI subcommand (`simulate`, `train`, `bench`, `cv`, `rate`,
/// `landscape`) with a config dict, writing artifacts under `config["out"]`.
/// Returns the command's JSON summary.
#[pyfunction]
fn run(py: Python<'_>, command: &str, config: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let kind: CommandKind = parse(command)?;
    let cfg = experiment(config)?;
    let summary = py.detach(move || cli::run_config(kind, &cfg)).map_err(err)?;
    to_py(py, &summary)
}

#[pymodule]
pub fn conquer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConquerError", m.py().get_type::<ConquerError>())?;
    m.add_function(wrap_pyfunction!(check_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_grad, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(default_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(rate_fit, m)?)?;
    m.add_function(wrap_pyfunction!(true_quantiles, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_trials, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyNoiseLaw>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFitted>()?;
    Ok(())
}
