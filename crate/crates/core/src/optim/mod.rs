//! Optimizer steps over a [`CoreSet`].
//!
//! The base optimizers (SGD with optional momentum, Adam) update cores from a
//! given list of gradients. [`sam_step`] and [`das_step`] wrap a base
//! optimizer: SAM recomputes gradients at a point perturbed along the
//! normalised gradient, DAS rescales every core by `1 + λ_k` before the base
//! update so that the norm deviation moves the way it would under SAM.

mod das;
mod layered;
mod sam;

use std::f64::consts::PI;

use crate::diagnostics::{DiagnosticsSink, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::model::{CoreSet, ReconstructionSpec};
use crate::objective::Objective;
use crate::tensor::DenseTensor;

pub use das::{das_step, DasStepTrace};
pub(crate) use das::{apply_scaling, check_core_norms, das_lambdas_for};
pub use layered::{layered_das_step, layered_sam_step, LayeredDasTrace, LayeredSamTrace};
pub use sam::{sam_step, SamStepTrace};
pub(crate) use sam::sam_step_at;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(eta: f64) -> Self {
        SgdConfig {
            eta,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("sgd eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("adam eta must be > 0, got {}", self.eta)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} = {b} not in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// The optimizer that SAM and DAS delegate their update to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaseOptimizer {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl BaseOptimizer {
    pub fn eta(&self) -> f64 {
        match self {
            BaseOptimizer::Sgd(c) => c.eta,
            BaseOptimizer::Adam(c) => c.eta,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        match &mut self {
            BaseOptimizer::Sgd(c) => c.eta = eta,
            BaseOptimizer::Adam(c) => c.eta = eta,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BaseOptimizer::Sgd(c) => c.validate(),
            BaseOptimizer::Adam(c) => c.validate(),
        }
    }

    pub fn apply(&self, cores: &mut [DenseTensor], grads: &[DenseTensor], state: &mut OptimizerState) -> Result<()> {
        match self {
            BaseOptimizer::Sgd(c) => sgd_update(cores, grads, c, state),
            BaseOptimizer::Adam(c) => adam_update(cores, grads, c, state),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
    pub base: BaseOptimizer,
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", self.rho)));
        }
        self.base.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DasConfig {
    pub alpha: f64,
    pub base: BaseOptimizer,
}

impl DasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        self.base.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
    Sam(SamConfig),
    Das(DasConfig),
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd(_) => "sgd",
            OptimizerConfig::Adam(_) => "adam",
            OptimizerConfig::Sam(_) => "sam",
            OptimizerConfig::Das(_) => "das",
        }
    }

    pub fn base(&self) -> BaseOptimizer {
        match *self {
            OptimizerConfig::Sgd(c) => BaseOptimizer::Sgd(c),
            OptimizerConfig::Adam(c) => BaseOptimizer::Adam(c),
            OptimizerConfig::Sam(c) => c.base,
            OptimizerConfig::Das(c) => c.base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => c.validate(),
            OptimizerConfig::Adam(c) => c.validate(),
            OptimizerConfig::Sam(c) => c.validate(),
            OptimizerConfig::Das(c) => c.validate(),
        }
    }

    fn with_eta(self, eta: f64) -> Self {
        match self {
            OptimizerConfig::Sgd(mut c) => {
                c.eta = eta;
                OptimizerConfig::Sgd(c)
            }
            OptimizerConfig::Adam(mut c) => {
                c.eta = eta;
                OptimizerConfig::Adam(c)
            }
            OptimizerConfig::Sam(mut c) => {
                c.base = c.base.with_eta(eta);
                OptimizerConfig::Sam(c)
            }
            OptimizerConfig::Das(mut c) => {
                c.base = c.base.with_eta(eta);
                OptimizerConfig::Das(c)
            }
        }
    }
}

/// Step-size schedule applied on top of the configured `eta`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    /// `eta_t = eta · (1 + cos(π t / total)) / 2`.
    Cosine { total: usize },
}

impl Schedule {
    pub fn eta_at(&self, eta: f64, t: usize) -> f64 {
        match *self {
            Schedule::Constant => eta,
            Schedule::Cosine { total } => {
                let frac = (t as f64 / total.max(1) as f64).min(1.0);
                eta * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Momentum buffers (or Adam first moments), Adam second moments, and the
/// step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    step: u64,
    first: Vec<DenseTensor>,
    second: Vec<DenseTensor>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[DenseTensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[DenseTensor] {
        &self.second
    }

    fn ensure(buffers: &mut Vec<DenseTensor>, cores: &[DenseTensor]) -> Result<()> {
        if buffers.is_empty() {
            *buffers = cores.iter().map(|c| DenseTensor::zeros(c.shape().clone())).collect();
            return Ok(());
        }
        let shapes_match = buffers.len() == cores.len()
            && buffers.iter().zip(cores).all(|(b, c)| b.shape() == c.shape());
        if !shapes_match {
            return Err(Error::ShapeMismatch("optimizer state does not match the cores".into()));
        }
        Ok(())
    }
}

fn check_grads(cores: &[DenseTensor], grads: &[DenseTensor]) -> Result<()> {
    if cores.len() != grads.len() {
        return Err(Error::LengthMismatch {
            left: cores.len(),
            right: grads.len(),
        });
    }
    for (k, (c, g)) in cores.iter().zip(grads).enumerate() {
        if c.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {k} has shape {} but core has {}",
                g.shape(),
                c.shape()
            )));
        }
    }
    Ok(())
}

/// Writes `updated` into `cores` only if every entry is finite.
fn commit(cores: &mut [DenseTensor], updated: Vec<Vec<f64>>, what: &str) -> Result<()> {
    if updated.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(what.to_string()));
    }
    for (core, data) in cores.iter_mut().zip(updated) {
        core.data_mut().copy_from_slice(&data);
    }
    Ok(())
}

fn sgd_update(cores: &mut [DenseTensor], grads: &[DenseTensor], cfg: &SgdConfig, state: &mut OptimizerState) -> Result<()> {
    check_grads(cores, grads)?;
    let decay = 1.0 - cfg.eta * cfg.weight_decay;
    if cfg.momentum == 0.0 {
        let updated: Vec<Vec<f64>> = cores
            .iter()
            .zip(grads)
            .map(|(c, g)| {
                c.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gx)| if decay == 1.0 { x - cfg.eta * gx } else { decay * x - cfg.eta * gx })
                    .collect()
            })
            .collect();
        commit(cores, updated, "sgd step")?;
    } else {
        OptimizerState::ensure(&mut state.first, cores)?;
        let mut bufs = state.first.clone();
        let updated: Vec<Vec<f64>> = cores
            .iter()
            .zip(grads)
            .zip(bufs.iter_mut())
            .map(|((c, g), buf)| {
                c.data()
                    .iter()
                    .zip(g.data())
                    .zip(buf.data_mut())
                    .map(|((&x, &gx), b)| {
                        *b = cfg.momentum * *b + gx;
                        decay * x - cfg.eta * *b
                    })
                    .collect()
            })
            .collect();
        commit(cores, updated, "sgd step")?;
        state.first = bufs;
    }
    state.step += 1;
    Ok(())
}

fn adam_update(cores: &mut [DenseTensor], grads: &[DenseTensor], cfg: &AdamConfig, state: &mut OptimizerState) -> Result<()> {
    check_grads(cores, grads)?;
    OptimizerState::ensure(&mut state.first, cores)?;
    OptimizerState::ensure(&mut state.second, cores)?;
    let t = state.step + 1;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.eta * cfg.weight_decay;
    let mut first = state.first.clone();
    let mut second = state.second.clone();
    let updated: Vec<Vec<f64>> = cores
        .iter()
        .zip(grads)
        .zip(first.iter_mut().zip(second.iter_mut()))
        .map(|((c, g), (m, v))| {
            c.data()
                .iter()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
                .map(|((&x, &gx), (mi, vi))| {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gx;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gx * gx;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    decay * x - cfg.eta * m_hat / (v_hat.sqrt() + cfg.epsilon)
                })
                .collect()
        })
        .collect();
    commit(cores, updated, "adam step")?;
    state.first = first;
    state.second = second;
    state.step = t;
    Ok(())
}

/// One SGD step: `G_k ← (1 − η·wd) G_k − η·b_k` with `b_k` the momentum
/// buffer (just `g_k` when momentum is zero).
pub fn sgd_step(cores: &mut CoreSet, grads: &[DenseTensor], cfg: &SgdConfig, state: &mut OptimizerState) -> Result<()> {
    cfg.validate()?;
    sgd_update(cores.cores_mut(), grads, cfg, state)
}

/// One bias-corrected Adam step with decoupled weight decay.
pub fn adam_step(cores: &mut CoreSet, grads: &[DenseTensor], cfg: &AdamConfig, state: &mut OptimizerState) -> Result<()> {
    cfg.validate()?;
    adam_update(cores.cores_mut(), grads, cfg, state)
}

/// Loss and per-core gradients at `cores`.
pub fn loss_and_grads<O: Objective + ?Sized>(
    spec: &ReconstructionSpec,
    cores: &[DenseTensor],
    objective: &O,
) -> Result<(f64, Vec<DenseTensor>)> {
    let t = crate::model::reconstruct_from(spec, cores)?;
    let (loss, dt) = objective.loss_and_grad(&t)?;
    let grads = crate::model::grad_cores_from(spec, cores, &dt)?;
    Ok((loss, grads))
}

/// Common summary of one optimizer step, measured at the pre-step cores.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub loss: f64,
    pub eta: f64,
    pub core_norms_sq: Vec<f64>,
    pub grad_norms_sq: Vec<f64>,
    pub lambdas: Option<Vec<f64>>,
    pub zero_gradient: bool,
}

/// A configured optimizer with its state and schedule.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    schedule: Schedule,
    state: OptimizerState,
    t: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            schedule: Schedule::Constant,
            state: OptimizerState::new(),
            t: 0,
        })
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn current_eta(&self) -> f64 {
        self.schedule.eta_at(self.config.base().eta(), self.t)
    }

    pub fn step<O: Objective + ?Sized>(
        &mut self,
        spec: &ReconstructionSpec,
        cores: &mut CoreSet,
        objective: &mut O,
    ) -> Result<StepTrace> {
        let eta = self.current_eta();
        let config = self.config.with_eta(eta);
        let trace = match config {
            OptimizerConfig::Sgd(_) | OptimizerConfig::Adam(_) => {
                objective.next_sample();
                let (loss, grads) = loss_and_grads(spec, cores.cores(), objective)?;
                let core_norms_sq = cores.norms_sq();
                let grad_norms_sq: Vec<f64> = grads.iter().map(crate::tensor::frobenius_norm_sq).collect();
                config.base().apply(cores.cores_mut(), &grads, &mut self.state)?;
                StepTrace {
                    loss,
                    eta,
                    core_norms_sq,
                    grad_norms_sq,
                    lambdas: None,
                    zero_gradient: grad_norms_sq_all_zero(&grads),
                }
            }
            OptimizerConfig::Sam(c) => {
                let tr = sam_step(spec, cores, objective, &c, &mut self.state)?;
                StepTrace {
                    loss: tr.loss,
                    eta,
                    core_norms_sq: tr.core_norms_sq,
                    grad_norms_sq: tr.grad_norms_sq,
                    lambdas: None,
                    zero_gradient: tr.zero_gradient,
                }
            }
            OptimizerConfig::Das(c) => {
                let tr = das_step(spec, cores, objective, &c, &mut self.state)?;
                StepTrace {
                    loss: tr.loss,
                    eta,
                    core_norms_sq: tr.core_norms_sq,
                    grad_norms_sq: tr.grad_norms_sq,
                    lambdas: Some(tr.lambdas),
                    zero_gradient: tr.zero_gradient,
                }
            }
        };
        self.t += 1;
        Ok(trace)
    }
}

fn grad_norms_sq_all_zero(grads: &[DenseTensor]) -> bool {
    grads.iter().all(|g| g.data().iter().all(|&x| x == 0.0))
}

/// Runs `iterations` steps, reporting one [`TrajectoryRecord`] per step to `sink`.
pub fn run<O: Objective + ?Sized>(
    spec: &ReconstructionSpec,
    mut cores: CoreSet,
    objective: &mut O,
    optimizer: &mut Optimizer,
    iterations: usize,
    sink: &mut dyn DiagnosticsSink,
) -> Result<CoreSet> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iteration count must be >= 1".into()));
    }
    for t in 0..iterations {
        let trace = optimizer
            .step(spec, &mut cores, objective)
            .map_err(|e| e.at_iteration(t))?;
        let record = TrajectoryRecord::from_trace(t, &trace);
        sink.record(&record).map_err(|e| e.at_iteration(t))?;
    }
    Ok(cores)
}
