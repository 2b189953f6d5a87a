//! Python bindings: tensors, models, objectives, optimizers, diagnostics and
//! the experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use normdyn::diagnostics::{self as diag, TheoremCheckReport, TrajectoryRecord};
use normdyn::experiment::{self, rng_stream};
use normdyn::model::{grad_cores, reconstruct};
use normdyn::optim::{AdamConfig, BaseOptimizer, DasConfig, SamConfig, SgdConfig};
use normdyn::tensor::{contract as contract_plan, frobenius_norm_sq, io};
use normdyn::{
    ContractionPlan, CoreSet, DenseTensor, MaskedMseObjective, NoisyTargetObjective, OptimizerConfig,
    ReconstructionSpec, Schedule, Shape,
};

const STREAM_INIT: u64 = 4;

fn err(e: normdyn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for normdyn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn shape(dims: Vec<usize>) -> PyResult<Shape> {
    if dims.is_empty() {
        Ok(Shape::scalar())
    } else {
        Shape::new(dims).py()
    }
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "normdyn", from_py_object)]
#[derive(Clone)]
struct Tensor(DenseTensor);

#[pymethods]
impl Tensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor(DenseTensor::from_vec(shape(dims)?, data).py()?))
    }

    #[staticmethod]
    fn zeros(dims: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor(DenseTensor::zeros(shape(dims)?)))
    }

    #[staticmethod]
    fn from_dtf1(bytes: &[u8]) -> PyResult<Self> {
        Ok(Tensor(io::from_dtf1_bytes(bytes).py()?))
    }

    /// Reads a `.dtf1` or `.csv` file.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Tensor(io::ingest_tensor(path).py()?))
    }

    fn to_dtf1<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &io::to_dtf1_bytes(&self.0))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_dtf1(path, &self.0).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, index: Vec<usize>) -> PyResult<f64> {
        self.0.get(&index).py()
    }

    fn norm_sq(&self) -> f64 {
        frobenius_norm_sq(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __eq__(&self, other: &Tensor) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.dims())
    }
}

/// Contracts `tensors` according to an einsum-style plan such as `"ia,ab->ib"`.
#[pyfunction]
fn contract(plan: &str, tensors: Vec<Tensor>) -> PyResult<Tensor> {
    let plan: ContractionPlan = plan.parse().py()?;
    let inputs: Vec<&DenseTensor> = tensors.iter().map(|t| &t.0).collect();
    Ok(Tensor(contract_plan(&plan, &inputs).py()?))
}

/// A reconstruction spec together with its trainable cores.
#[pyclass(name = "Model", module = "normdyn")]
struct Model {
    spec: ReconstructionSpec,
    cores: CoreSet,
}

impl Model {
    fn init(spec: ReconstructionSpec, seed: u64, scale: f64) -> Self {
        let cores = CoreSet::random(&spec, scale, &mut rng_stream(seed, STREAM_INIT));
        Model { spec, cores }
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (modes, rank, seed = 0, scale = 1.0))]
    fn cp(modes: Vec<usize>, rank: usize, seed: u64, scale: f64) -> PyResult<Self> {
        Ok(Model::init(ReconstructionSpec::cp(&modes, rank).py()?, seed, scale))
    }

    #[staticmethod]
    #[pyo3(signature = (modes, ranks, seed = 0, scale = 1.0))]
    fn tucker(modes: Vec<usize>, ranks: Vec<usize>, seed: u64, scale: f64) -> PyResult<Self> {
        Ok(Model::init(ReconstructionSpec::tucker(&modes, &ranks).py()?, seed, scale))
    }

    #[staticmethod]
    #[pyo3(signature = (rows, r1, r2, cols, seed = 0, scale = 1.0))]
    fn tucker2(rows: usize, r1: usize, r2: usize, cols: usize, seed: u64, scale: f64) -> PyResult<Self> {
        Ok(Model::init(ReconstructionSpec::tucker2(rows, r1, r2, cols).py()?, seed, scale))
    }

    #[staticmethod]
    #[pyo3(signature = (modes, ranks, seed = 0, scale = 1.0))]
    fn tt(modes: Vec<usize>, ranks: Vec<usize>, seed: u64, scale: f64) -> PyResult<Self> {
        Ok(Model::init(ReconstructionSpec::tt(&modes, &ranks).py()?, seed, scale))
    }

    #[staticmethod]
    #[pyo3(signature = (modes, ranks, seed = 0, scale = 1.0))]
    fn tr(modes: Vec<usize>, ranks: Vec<usize>, seed: u64, scale: f64) -> PyResult<Self> {
        Ok(Model::init(ReconstructionSpec::tr(&modes, &ranks).py()?, seed, scale))
    }

    #[staticmethod]
    #[pyo3(signature = (plan, core_shapes, seed = 0, scale = 1.0))]
    fn custom(plan: &str, core_shapes: Vec<Vec<usize>>, seed: u64, scale: f64) -> PyResult<Self> {
        let shapes = core_shapes.into_iter().map(shape).collect::<PyResult<Vec<_>>>()?;
        Ok(Model::init(ReconstructionSpec::custom(plan, shapes).py()?, seed, scale))
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.spec.family().name()
    }

    #[getter]
    fn plan(&self) -> String {
        self.spec.plan().to_string()
    }

    #[getter]
    fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape().dims().to_vec()
    }

    #[getter]
    fn cores(&self) -> Vec<Tensor> {
        self.cores.cores().iter().cloned().map(Tensor).collect()
    }

    #[setter]
    fn set_cores(&mut self, cores: Vec<Tensor>) -> PyResult<()> {
        self.cores = CoreSet::new(&self.spec, cores.into_iter().map(|t| t.0).collect()).py()?;
        Ok(())
    }

    fn reconstruct(&self) -> PyResult<Tensor> {
        Ok(Tensor(reconstruct(&self.spec, &self.cores).py()?))
    }

    fn norms_sq(&self) -> Vec<f64> {
        self.cores.norms_sq()
    }

    /// Per-core gradients of the objective at the current cores.
    fn grads(&self, objective: &Objective) -> PyResult<Vec<Tensor>> {
        let t = reconstruct(&self.spec, &self.cores).py()?;
        let (_, dt) = objective.inner().loss_and_grad(&t).py()?;
        Ok(grad_cores(&self.spec, &self.cores, &dt).py()?.into_iter().map(Tensor).collect())
    }

    /// Multiplies core `k` by `scalars[k]` in place.
    fn rescale(&mut self, scalars: Vec<f64>) -> PyResult<()> {
        self.cores = self.cores.scaled(&scalars).py()?;
        Ok(())
    }

    /// Rescales the cores to equal norms in place, leaving the output unchanged.
    fn balance(&mut self) -> PyResult<()> {
        self.cores = self.cores.balanced().py()?;
        Ok(())
    }

    fn copy(&self) -> Model {
        Model {
            spec: self.spec.clone(),
            cores: self.cores.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.spec)
    }
}

enum ObjectiveKind {
    Masked(MaskedMseObjective),
    Noisy(Box<NoisyTargetObjective>),
}

/// Masked mean squared error, optionally against a noisy target.
#[pyclass(name = "Objective", module = "normdyn")]
struct Objective(ObjectiveKind);

impl Objective {
    fn inner(&self) -> &dyn normdyn::Objective {
        match &self.0 {
            ObjectiveKind::Masked(o) => o,
            ObjectiveKind::Noisy(o) => o.as_ref(),
        }
    }

    fn inner_mut(&mut self) -> &mut dyn normdyn::Objective {
        match &mut self.0 {
            ObjectiveKind::Masked(o) => o,
            ObjectiveKind::Noisy(o) => o.as_mut(),
        }
    }
}

#[pymethods]
impl Objective {
    #[staticmethod]
    #[pyo3(signature = (target, mask = None))]
    fn masked_mse(target: Tensor, mask: Option<Tensor>) -> PyResult<Self> {
        let obj = match mask {
            Some(m) => MaskedMseObjective::new(target.0, m.0),
            None => MaskedMseObjective::full(target.0),
        };
        Ok(Objective(ObjectiveKind::Masked(obj.py()?)))
    }

    /// Full MSE against `clean + alpha * noise`, with the noise redrawn every
    /// step when `resample` is set.
    #[staticmethod]
    #[pyo3(signature = (clean, alpha, resample = true, seed = 0))]
    fn noisy(clean: Tensor, alpha: f64, resample: bool, seed: u64) -> Self {
        Objective(ObjectiveKind::Noisy(Box::new(NoisyTargetObjective::new(
            clean.0, alpha, resample, seed,
        ))))
    }

    fn loss(&self, model: &Model) -> PyResult<f64> {
        let t = reconstruct(&model.spec, &model.cores).py()?;
        Ok(self.inner().loss_and_grad(&t).py()?.0)
    }

    fn __repr__(&self) -> &'static str {
        match self.0 {
            ObjectiveKind::Masked(_) => "Objective(masked_mse)",
            ObjectiveKind::Noisy(_) => "Objective(noisy)",
        }
    }
}

/// Computes R² of the model output against `truth` on the entries where
/// `mask` is 1.
#[pyfunction]
fn r2_score(model: &Model, truth: &Tensor, mask: &Tensor) -> PyResult<f64> {
    let pred = reconstruct(&model.spec, &model.cores).py()?;
    normdyn::objective::r2_score(&pred, &truth.0, &mask.0).py()
}

fn base_optimizer(name: &str, eta: f64, momentum: f64, weight_decay: f64) -> PyResult<BaseOptimizer> {
    match name {
        "sgd" => Ok(BaseOptimizer::Sgd(SgdConfig {
            eta,
            momentum,
            weight_decay,
        })),
        "adam" => Ok(BaseOptimizer::Adam(AdamConfig {
            eta,
            weight_decay,
            ..AdamConfig::default()
        })),
        other => Err(PyValueError::new_err(format!("unknown base optimizer {other:?}"))),
    }
}

fn record_dict<'py>(py: Python<'py>, r: &TrajectoryRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t", r.t)?;
    d.set_item("loss", r.loss)?;
    d.set_item("q", r.q)?;
    d.set_item("cov", r.cov)?;
    d.set_item("core_norms_sq", r.core_norms_sq.clone())?;
    d.set_item("grad_norms_sq", r.grad_norms_sq.clone())?;
    d.set_item("lambdas", r.lambdas.clone())?;
    Ok(d)
}

/// SGD, Adam, SAM or DAS with its state.
#[pyclass(name = "Optimizer", module = "normdyn")]
struct Optimizer {
    inner: normdyn::Optimizer,
    t: usize,
}

#[pymethods]
impl Optimizer {
    /// `kind` is one of `sgd`, `adam`, `sam`, `das`. SAM and DAS delegate
    /// the update to `base`. `cosine_total` switches on cosine annealing.
    #[new]
    #[pyo3(signature = (kind, eta, rho = 0.05, alpha = 0.05, base = "sgd", momentum = 0.0, weight_decay = 0.0, cosine_total = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        eta: f64,
        rho: f64,
        alpha: f64,
        base: &str,
        momentum: f64,
        weight_decay: f64,
        cosine_total: Option<usize>,
    ) -> PyResult<Self> {
        let config = match kind {
            "sgd" | "adam" => match base_optimizer(kind, eta, momentum, weight_decay)? {
                BaseOptimizer::Sgd(c) => OptimizerConfig::Sgd(c),
                BaseOptimizer::Adam(c) => OptimizerConfig::Adam(c),
            },
            "sam" => OptimizerConfig::Sam(SamConfig {
                rho,
                base: base_optimizer(base, eta, momentum, weight_decay)?,
            }),
            "das" => OptimizerConfig::Das(DasConfig {
                alpha,
                base: base_optimizer(base, eta, momentum, weight_decay)?,
            }),
            other => return Err(PyValueError::new_err(format!("unknown optimizer {other:?}"))),
        };
        let schedule = cosine_total.map_or(Schedule::Constant, |total| Schedule::Cosine { total });
        Ok(Optimizer {
            inner: normdyn::Optimizer::new(config).py()?.with_schedule(schedule),
            t: 0,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.config().name()
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.current_eta()
    }

    /// One step in place; returns the diagnostics measured before it.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        model: &mut Model,
        objective: &mut Objective,
    ) -> PyResult<Bound<'py, PyDict>> {
        let trace = self
            .inner
            .step(&model.spec, &mut model.cores, objective.inner_mut())
            .py()?;
        let record = TrajectoryRecord::from_trace(self.t, &trace);
        self.t += 1;
        record_dict(py, &record)
    }

    /// `iterations` steps in place; returns one diagnostics dict per step.
    fn run<'py>(
        &mut self,
        py: Python<'py>,
        model: &mut Model,
        objective: &mut Objective,
        iterations: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        (0..iterations).map(|_| self.step(py, model, objective)).collect()
    }
}

#[pyfunction]
fn norm_deviation(core_norms_sq: Vec<f64>) -> f64 {
    diag::norm_deviation(&core_norms_sq)
}

#[pyfunction]
fn norm_deviation_pairwise(core_norms_sq: Vec<f64>) -> f64 {
    diag::norm_deviation_pairwise(&core_norms_sq)
}

#[pyfunction]
fn norm_grad_covariance(core_norms_sq: Vec<f64>, grad_norms_sq: Vec<f64>) -> PyResult<f64> {
    diag::norm_grad_covariance(&core_norms_sq, &grad_norms_sq).py()
}

/// Change of `Q` when the squared norms move by `delta`, computed stably.
#[pyfunction]
fn norm_deviation_change(core_norms_sq: Vec<f64>, delta: Vec<f64>) -> PyResult<f64> {
    if core_norms_sq.len() != delta.len() {
        return Err(PyValueError::new_err("norms and delta differ in length"));
    }
    Ok(diag::norm_deviation_change(&core_norms_sq, &delta))
}

fn report_dict<'py>(py: Python<'py>, r: &TheoremCheckReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("theorem", r.theorem.name())?;
    d.set_item("measured", r.measured)?;
    d.set_item("predicted", r.predicted)?;
    d.set_item("abs_residual", r.abs_residual)?;
    d.set_item("rel_residual", r.rel_residual)?;
    d.set_item("eta", r.params.eta)?;
    d.set_item("rho", r.params.rho)?;
    d.set_item("alpha", r.params.alpha)?;
    d.set_item("verdict", r.verdict.to_string())?;
    d.set_item("passed", r.passed())?;
    for (k, v) in &r.extras {
        d.set_item(k, *v)?;
    }
    Ok(d)
}

/// Runs one of the one-step checks from the model's current cores.
///
/// `theorem` is `sam-q-dynamics`, `sam-pairwise-gap`, `das-matches-sam`,
/// `sgd-conservation` or `sgd-balanced-drift`.
#[pyfunction]
#[pyo3(signature = (theorem, model, objective, eta, rho = 0.05, steps = 5, pair = (0, 1)))]
#[allow(clippy::too_many_arguments)]
fn check<'py>(
    py: Python<'py>,
    theorem: &str,
    model: &Model,
    objective: &Objective,
    eta: f64,
    rho: f64,
    steps: usize,
    pair: (usize, usize),
) -> PyResult<Bound<'py, PyDict>> {
    let (spec, cores, obj) = (&model.spec, &model.cores, objective.inner());
    let report = match theorem {
        "sam-q-dynamics" => diag::check_sam_q_dynamics(spec, cores, obj, rho, eta),
        "sam-pairwise-gap" => diag::check_pairwise_sam_dynamics(spec, cores, obj, rho, eta, pair.0, pair.1),
        "das-matches-sam" => diag::check_das_matches_sam(spec, cores, obj, rho, eta),
        "sgd-conservation" => diag::check_sgd_conservation(spec, cores, obj, eta, steps),
        "sgd-balanced-drift" => diag::check_sgd_balanced_drift(spec, cores, obj, eta, steps),
        other => return Err(PyValueError::new_err(format!("unknown check {other:?}"))),
    }
    .py()?;
    report_dict(py, &report)
}

/// Ground truth from the model's spec: returns `(target, clean, cores)`.
#[pyfunction]
#[pyo3(signature = (model, seed = 0, alpha = 0.0))]
fn generate_synthetic(model: &Model, seed: u64, alpha: f64) -> PyResult<(Tensor, Tensor, Vec<Tensor>)> {
    let data = experiment::generate_synthetic(&model.spec, seed, alpha).py()?;
    let cores = data.cores.into_cores().into_iter().map(Tensor).collect();
    Ok((Tensor(data.target), Tensor(data.clean), cores))
}

/// Binary mask with `round(density * numel)` ones.
#[pyfunction]
#[pyo3(signature = (dims, density, seed = 0))]
fn random_mask(dims: Vec<usize>, density: f64, seed: u64) -> PyResult<Tensor> {
    Ok(Tensor(experiment::random_mask(&shape(dims)?, density, seed).py()?))
}

fn outcome_dict<'py>(py: Python<'py>, o: &experiment::ExperimentOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("passed", o.passed())?;
    d.set_item("failed_checks", o.failed_checks())?;
    d.set_item("report", o.report())?;
    d.set_item("summary", o.summary())?;
    let checks = o
        .checks
        .iter()
        .map(|(_, r)| report_dict(py, r))
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("checks", checks)?;
    Ok(d)
}

/// Runs a TOML experiment config, writing outputs under `out` when given.
#[pyfunction]
#[pyo3(signature = (path, out = None, seed = None))]
fn run_config<'py>(
    py: Python<'py>,
    path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = experiment::parse_config(&path).py()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = py.detach(|| experiment::run_experiment(&cfg, out.as_deref())).py()?;
    outcome_dict(py, &outcome)
}

/// The theorem suite over `seeds` consecutive seeds starting at `seed`.
#[pyfunction]
#[pyo3(signature = (seeds = 10, seed = 0))]
fn run_suite(py: Python<'_>, seeds: u64, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let outcome = py
        .detach(|| experiment::run_theorem_suite(seed, seeds))
        .py()?
        .into_outcome();
    outcome_dict(py, &outcome)
}

#[pymodule(name = "normdyn")]
fn normdyn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_class::<Objective>()?;
    m.add_class::<Optimizer>()?;
    m.add_function(wrap_pyfunction!(contract, m)?)?;
    m.add_function(wrap_pyfunction!(r2_score, m)?)?;
    m.add_function(wrap_pyfunction!(norm_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(norm_deviation_pairwise, m)?)?;
    m.add_function(wrap_pyfunction!(norm_grad_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(norm_deviation_change, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(random_mask, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
