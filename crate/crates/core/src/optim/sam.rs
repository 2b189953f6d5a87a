use super::{loss_and_grads, OptimizerState, SamConfig};
use crate::error::Result;
use crate::model::{CoreSet, ReconstructionSpec};
use crate::objective::Objective;
use crate::tensor::{axpy_scale, frobenius_norm_sq, DenseTensor};

/// What one SAM step saw. Norms and gradients refer to the pre-step cores.
#[derive(Clone, Debug, PartialEq)]
pub struct SamStepTrace {
    pub loss: f64,
    pub grads: Vec<DenseTensor>,
    /// Gradients at the perturbed point; these drive the update.
    pub perturbed_grads: Vec<DenseTensor>,
    /// `(Σ_j ||g_j||²)^{-1/2}`; zero when every gradient vanished.
    pub u: f64,
    pub core_norms_sq: Vec<f64>,
    pub grad_norms_sq: Vec<f64>,
    /// `(Σ_k ||ρ u g_k||²)^{1/2}`, equal to `ρ` unless the step degenerated.
    pub perturbation_norm: f64,
    /// Every gradient was zero, so the base step ran with the plain gradients.
    pub zero_gradient: bool,
}

/// One SAM step. Draws a fresh objective sample, then:
///
/// 1. `g_k = ∇_{G_k} f` at the current cores;
/// 2. `G̃_k = G_k + ρ u g_k` for all cores at once, `u = (Σ_j ||g_j||²)^{-1/2}`;
/// 3. `g̃_k = ∇_{G_k} f` at `{G̃_k}`;
/// 4. base-optimizer update of the original `G_k` with `g̃_k`.
pub fn sam_step<O: Objective + ?Sized>(
    spec: &ReconstructionSpec,
    cores: &mut CoreSet,
    objective: &mut O,
    cfg: &SamConfig,
    state: &mut OptimizerState,
) -> Result<SamStepTrace> {
    cfg.validate()?;
    objective.next_sample();
    sam_step_at(spec, cores, &*objective, cfg, state)
}

/// [`sam_step`] against the objective's current sample.
pub(crate) fn sam_step_at<O: Objective + ?Sized>(
    spec: &ReconstructionSpec,
    cores: &mut CoreSet,
    objective: &O,
    cfg: &SamConfig,
    state: &mut OptimizerState,
) -> Result<SamStepTrace> {
    let core_norms_sq = cores.norms_sq();
    let (loss, grads) = loss_and_grads(spec, cores.cores(), objective)?;
    let grad_norms_sq: Vec<f64> = grads.iter().map(frobenius_norm_sq).collect();
    let total: f64 = grad_norms_sq.iter().sum();

    if total == 0.0 {
        cfg.base.apply(cores.cores_mut(), &grads, state)?;
        return Ok(SamStepTrace {
            loss,
            perturbed_grads: grads.clone(),
            grads,
            u: 0.0,
            core_norms_sq,
            grad_norms_sq,
            perturbation_norm: 0.0,
            zero_gradient: true,
        });
    }

    let u = 1.0 / total.sqrt();
    let step = cfg.rho * u;
    let perturbed = cores
        .cores()
        .iter()
        .zip(&grads)
        .map(|(c, g)| axpy_scale(c, 1.0, g, step))
        .collect::<Result<Vec<_>>>()?;
    let (_, perturbed_grads) = loss_and_grads(spec, &perturbed, objective)?;
    let perturbation_norm = (step * step * total).sqrt();

    cfg.base.apply(cores.cores_mut(), &perturbed_grads, state)?;
    Ok(SamStepTrace {
        loss,
        grads,
        perturbed_grads,
        u,
        core_norms_sq,
        grad_norms_sq,
        perturbation_norm,
        zero_gradient: false,
    })
}
