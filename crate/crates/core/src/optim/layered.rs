//! SAM and DAS over a [`LayeredModel`]. The gradient normaliser `u_D` spans
//! every core of every layer; DAS computes `ḡ_l` and `λ_{k,l}` per layer.

use super::das::{apply_scaling, check_core_norms, das_lambdas};
use super::{DasConfig, OptimizerState, SamConfig};
use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::objective::ChainRegressionObjective;
use crate::tensor::{axpy_scale, frobenius_norm_sq, DenseTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredSamTrace {
    pub loss: f64,
    pub u_d: f64,
    pub core_norms_sq: Vec<Vec<f64>>,
    pub grad_norms_sq: Vec<Vec<f64>>,
    /// Gradients at the perturbed point, grouped by layer.
    pub perturbed_grads: Vec<Vec<DenseTensor>>,
    pub perturbation_norm: f64,
    pub zero_gradient: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredDasTrace {
    pub loss: f64,
    pub u_d: f64,
    pub gbars: Vec<f64>,
    pub lambdas: Vec<Vec<f64>>,
    pub core_norms_sq: Vec<Vec<f64>>,
    pub grad_norms_sq: Vec<Vec<f64>>,
    pub zero_gradient: bool,
}

fn check_states(model: &LayeredModel, states: &[OptimizerState]) -> Result<()> {
    if states.len() != model.num_layers() {
        return Err(Error::LengthMismatch {
            left: states.len(),
            right: model.num_layers(),
        });
    }
    Ok(())
}

fn norms(grads: &[Vec<DenseTensor>]) -> Vec<Vec<f64>> {
    grads.iter().map(|l| l.iter().map(frobenius_norm_sq).collect()).collect()
}

/// SAM step over every layer with the global normaliser
/// `u_D = (Σ_l Σ_k ||g_{k,l}||²)^{-1/2}`. `states` holds one entry per layer.
pub fn layered_sam_step(
    model: &mut LayeredModel,
    objective: &ChainRegressionObjective,
    cfg: &SamConfig,
    states: &mut [OptimizerState],
) -> Result<LayeredSamTrace> {
    cfg.validate()?;
    check_states(model, states)?;
    let core_norms_sq = model.norms_sq();
    let cores = model.core_sets();
    let (loss, grads) = model.loss_and_grads_at(&cores, objective)?;
    let grad_norms_sq = norms(&grads);
    let total: f64 = grad_norms_sq.iter().flatten().sum();

    let (update_grads, u_d, perturbation_norm) = if total == 0.0 {
        (grads, 0.0, 0.0)
    } else {
        let u_d = 1.0 / total.sqrt();
        let step = cfg.rho * u_d;
        let perturbed = cores
            .iter()
            .zip(&grads)
            .map(|(cs, gs)| {
                cs.iter()
                    .zip(gs)
                    .map(|(c, g)| axpy_scale(c, 1.0, g, step))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, perturbed_grads) = model.loss_and_grads_at(&perturbed, objective)?;
        (perturbed_grads, u_d, (step * step * total).sqrt())
    };

    for ((layer, g), state) in model.layers_mut().iter_mut().zip(&update_grads).zip(states.iter_mut()) {
        cfg.base.apply(layer.cores.cores_mut(), g, state)?;
    }
    Ok(LayeredSamTrace {
        loss,
        u_d,
        core_norms_sq,
        grad_norms_sq,
        perturbed_grads: update_grads,
        perturbation_norm,
        zero_gradient: total == 0.0,
    })
}

/// DAS step over every layer: `λ_{k,l} = η α u_D (||g_{k,l}||² − ḡ_l) / ||G_{k,l}||²`.
pub fn layered_das_step(
    model: &mut LayeredModel,
    objective: &ChainRegressionObjective,
    cfg: &DasConfig,
    states: &mut [OptimizerState],
) -> Result<LayeredDasTrace> {
    cfg.validate()?;
    check_states(model, states)?;
    let core_norms_sq = model.norms_sq();
    for s in &core_norms_sq {
        check_core_norms(s)?;
    }
    let (loss, grads) = model.loss_and_grads(objective)?;
    let grad_norms_sq = norms(&grads);
    let gbars: Vec<f64> = grad_norms_sq
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let total: f64 = grad_norms_sq
        .iter()
        .zip(&gbars)
        .map(|(g, gbar)| g.len() as f64 * gbar)
        .sum();

    let u_d = if total == 0.0 { 0.0 } else { 1.0 / total.sqrt() };
    let lambdas: Vec<Vec<f64>> = core_norms_sq
        .iter()
        .zip(&grad_norms_sq)
        .zip(&gbars)
        .map(|((s, g), &gbar)| {
            if total == 0.0 {
                vec![0.0; s.len()]
            } else {
                das_lambdas(cfg.base.eta(), cfg.alpha, u_d, gbar, s, g)
            }
        })
        .collect();

    for (((layer, g), state), l) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads)
        .zip(states.iter_mut())
        .zip(&lambdas)
    {
        apply_scaling(layer.cores.cores_mut(), l)?;
        cfg.base.apply(layer.cores.cores_mut(), g, state)?;
    }
    Ok(LayeredDasTrace {
        loss,
        u_d,
        gbars,
        lambdas,
        core_norms_sq,
        grad_norms_sq,
        zero_gradient: total == 0.0,
    })
}
