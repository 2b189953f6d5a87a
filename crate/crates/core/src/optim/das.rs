use super::{loss_and_grads, DasConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{CoreSet, ReconstructionSpec};
use crate::objective::Objective;
use crate::tensor::{frobenius_norm_sq, DenseTensor};

/// Smallest squared core norm for which `λ_k` is computed.
pub const MIN_CORE_NORM_SQ: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct DasStepTrace {
    pub loss: f64,
    pub lambdas: Vec<f64>,
    /// Mean squared gradient norm `ḡ`.
    pub gbar: f64,
    /// `(K ḡ)^{-1/2}`; zero when every gradient vanished.
    pub u: f64,
    pub core_norms_sq: Vec<f64>,
    pub grad_norms_sq: Vec<f64>,
    pub zero_gradient: bool,
}

/// `λ_k = η α u (||g_k||² − ḡ) / ||G_k||²`. All-equal gradient norms give
/// exactly zero.
pub(crate) fn das_lambdas(eta: f64, alpha: f64, u: f64, gbar: f64, core_norms_sq: &[f64], grad_norms_sq: &[f64]) -> Vec<f64> {
    let uniform = grad_norms_sq.windows(2).all(|w| w[0] == w[1]);
    core_norms_sq
        .iter()
        .zip(grad_norms_sq)
        .map(|(&s, &g)| if uniform { 0.0 } else { eta * alpha * u * (g - gbar) / s })
        .collect()
}

/// [`das_lambdas`] with `ḡ` and `u` derived from the gradient norms.
pub(crate) fn das_lambdas_for(eta: f64, alpha: f64, core_norms_sq: &[f64], grad_norms_sq: &[f64]) -> Vec<f64> {
    let k = grad_norms_sq.len() as f64;
    let gbar = grad_norms_sq.iter().sum::<f64>() / k;
    if gbar == 0.0 {
        return vec![0.0; grad_norms_sq.len()];
    }
    das_lambdas(eta, alpha, 1.0 / (k * gbar).sqrt(), gbar, core_norms_sq, grad_norms_sq)
}

pub(crate) fn check_core_norms(core_norms_sq: &[f64]) -> Result<()> {
    match core_norms_sq.iter().position(|&s| s < MIN_CORE_NORM_SQ) {
        Some(k) => Err(Error::ZeroCoreNorm { core: k }),
        None => Ok(()),
    }
}

/// Multiplies core `k` by `1 + λ_k` in place.
pub(crate) fn apply_scaling(cores: &mut [DenseTensor], lambdas: &[f64]) -> Result<()> {
    for (core, &lambda) in cores.iter_mut().zip(lambdas) {
        if lambda == 0.0 {
            continue;
        }
        let factor = 1.0 + lambda;
        if !core.data().iter().all(|x| (factor * x).is_finite()) {
            return Err(Error::Numerical("das scaling".into()));
        }
        core.data_mut().iter_mut().for_each(|x| *x *= factor);
    }
    Ok(())
}

/// One DAS step: a single gradient pass, the scaling `G_k ← (1 + λ_k) G_k`,
/// then the base-optimizer update with the gradients from the unscaled cores.
/// `η` is the base optimizer's current step size. Adam moments are left
/// untouched by the scaling.
pub fn das_step<O: Objective + ?Sized>(
    spec: &ReconstructionSpec,
    cores: &mut CoreSet,
    objective: &mut O,
    cfg: &DasConfig,
    state: &mut OptimizerState,
) -> Result<DasStepTrace> {
    cfg.validate()?;
    objective.next_sample();
    das_step_at(spec, cores, &*objective, cfg, state)
}

pub(crate) fn das_step_at<O: Objective + ?Sized>(
    spec: &ReconstructionSpec,
    cores: &mut CoreSet,
    objective: &O,
    cfg: &DasConfig,
    state: &mut OptimizerState,
) -> Result<DasStepTrace> {
    let core_norms_sq = cores.norms_sq();
    check_core_norms(&core_norms_sq)?;
    let (loss, grads) = loss_and_grads(spec, cores.cores(), objective)?;
    let grad_norms_sq: Vec<f64> = grads.iter().map(frobenius_norm_sq).collect();
    let k = grad_norms_sq.len() as f64;
    let gbar = grad_norms_sq.iter().sum::<f64>() / k;

    let zero_gradient = gbar == 0.0;
    let u = if zero_gradient { 0.0 } else { 1.0 / (k * gbar).sqrt() };
    let lambdas = das_lambdas_for(cfg.base.eta(), cfg.alpha, &core_norms_sq, &grad_norms_sq);

    apply_scaling(cores.cores_mut(), &lambdas)?;
    cfg.base.apply(cores.cores_mut(), &grads, state)?;
    Ok(DasStepTrace {
        loss,
        lambdas,
        gbar,
        u,
        core_norms_sq,
        grad_norms_sq,
        zero_gradient,
    })
}
