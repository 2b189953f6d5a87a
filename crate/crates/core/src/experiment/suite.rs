//! The built-in theorem-check suite over all shipped families.

use rand::Rng;

use super::{rng_stream, ExperimentKind, ExperimentOutcome};
use crate::diagnostics::{
    check_das_matches_sam, check_layerwise_q, check_pairwise_sam_dynamics, check_sam_q_dynamics,
    check_sgd_balanced_drift, check_sgd_conservation, observe_shrinkage, ShrinkageObservation, TheoremCheckReport,
};
use crate::error::Result;
use crate::model::{CoreSet, Layer, LayeredModel, ModelFamily, ReconstructionSpec};
use crate::objective::{ChainRegressionObjective, MaskedMseObjective};
use crate::tensor::{DenseTensor, Shape};

/// Step size of the SGD conservation checks.
pub const SGD_ETA: f64 = 1e-3;
/// Steps along the SGD trajectory at which the η-halving ratio is measured.
pub const SGD_STEPS: usize = 5;
/// Steps of the balanced-initialisation drift probe.
pub const BALANCED_STEPS: usize = 100;
/// Step size and radius of the SAM one-step checks.
pub const SAM_ETA: f64 = 1e-5;
pub const SAM_RHO: f64 = 1e-3;
/// Step size of the DAS-versus-SAM check (with `α = ρ = SAM_RHO`).
pub const DAS_ETA: f64 = 1e-4;
/// SAM steps recorded by the pairwise-gap observation.
pub const SHRINK_STEPS: usize = 50;

const STREAM_SUITE: u64 = 16;

/// Small instance of `family` with standard normal cores and a standard
/// normal, fully observed target.
pub fn suite_instance(family: ModelFamily, seed: u64) -> Result<(ReconstructionSpec, CoreSet, MaskedMseObjective)> {
    let spec = match family {
        ModelFamily::Cp => ReconstructionSpec::cp(&[4, 5, 3], 3)?,
        ModelFamily::Tucker => ReconstructionSpec::tucker(&[4, 5, 3], &[2, 3, 2])?,
        ModelFamily::Tucker2 => ReconstructionSpec::tucker2(6, 3, 4, 5)?,
        ModelFamily::TensorTrain => ReconstructionSpec::tt(&[4, 5, 3], &[2, 3])?,
        ModelFamily::TensorRing => ReconstructionSpec::tr(&[4, 5, 3], &[2, 3, 2])?,
        ModelFamily::Custom => ReconstructionSpec::custom("ir,jr->ij", vec![Shape::new([6, 3])?, Shape::new([5, 3])?])?,
    };
    let mut rng = rng_stream(seed, STREAM_SUITE + family as u64);
    let cores = CoreSet::random(&spec, 1.0, &mut rng);
    let target = DenseTensor::random_normal(spec.output_shape().clone(), 1.0, &mut rng);
    Ok((spec, cores, MaskedMseObjective::full(target)?))
}

/// Two stacked Tucker-2 layers `W_2 W_1` (3 → 4 → 2) fitted to random data.
pub fn layered_instance(seed: u64) -> Result<(LayeredModel, ChainRegressionObjective)> {
    let mut rng = rng_stream(seed, STREAM_SUITE + 8);
    let s1 = ReconstructionSpec::tucker2(4, 2, 3, 3)?;
    let s2 = ReconstructionSpec::tucker2(2, 2, 2, 4)?;
    let c1 = CoreSet::random(&s1, 1.0, &mut rng);
    let c2 = CoreSet::random(&s2, 1.0, &mut rng);
    let model = LayeredModel::new(vec![Layer::new(s1, c1, 4, 3)?, Layer::new(s2, c2, 2, 4)?])?;
    let inputs = DenseTensor::random_normal(Shape::new([3, 8])?, 1.0, &mut rng);
    let targets = DenseTensor::random_normal(Shape::new([2, 8])?, 1.0, &mut rng);
    Ok((model, ChainRegressionObjective::new(inputs, targets)?))
}

/// Two-core factorisation `A Bᵀ` whose core norms differ by a factor of
/// about 100 (squared), fitted to a random matrix.
pub fn imbalanced_mf_instance(seed: u64) -> Result<(ReconstructionSpec, CoreSet, MaskedMseObjective)> {
    let mut rng = rng_stream(seed, STREAM_SUITE + 9);
    let spec = ReconstructionSpec::custom("ir,jr->ij", vec![Shape::new([6, 2])?, Shape::new([5, 2])?])?;
    let big: f64 = rng.random_range(2.5..4.0);
    let small: f64 = rng.random_range(0.2..0.3);
    let cores = CoreSet::random(&spec, 1.0, &mut rng).scaled(&[big, small])?;
    let target = DenseTensor::random_normal(spec.output_shape().clone(), 1.0, &mut rng);
    Ok((spec, cores, MaskedMseObjective::full(target)?))
}

/// Checks and observations from [`run_theorem_suite`].
#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub base_seed: u64,
    pub checks: Vec<(String, TheoremCheckReport)>,
    pub observations: Vec<(String, ShrinkageObservation)>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, r)| r.passed())
    }

    pub fn into_outcome(self) -> ExperimentOutcome {
        ExperimentOutcome {
            kind: ExperimentKind::TheoremSuite,
            seed: self.base_seed,
            runs: Vec::new(),
            checks: self.checks,
            observations: self.observations,
        }
    }
}

/// Every check on every shipped family for seeds `base_seed..base_seed + seeds`.
pub fn run_theorem_suite(base_seed: u64, seeds: u64) -> Result<SuiteOutcome> {
    let mut checks = Vec::new();
    let mut observations = Vec::new();
    for seed in base_seed..base_seed + seeds {
        for family in ModelFamily::SHIPPED {
            let (spec, cores, obj) = suite_instance(family, seed)?;
            let tag = |check: &str| format!("seed{seed}/{family}/{check}");
            let ctx = |e: crate::Error| e.context(format!("seed {seed}, {family}"));
            checks.push((tag("sgd"), check_sgd_conservation(&spec, &cores, &obj, SGD_ETA, SGD_STEPS).map_err(ctx)?));
            let balanced = cores.balanced()?;
            checks.push((
                tag("sgd-balanced"),
                check_sgd_balanced_drift(&spec, &balanced, &obj, SGD_ETA, BALANCED_STEPS).map_err(ctx)?,
            ));
            checks.push((tag("sam-q"), check_sam_q_dynamics(&spec, &cores, &obj, SAM_RHO, SAM_ETA).map_err(ctx)?));
            for j in 1..cores.len() {
                checks.push((
                    tag(&format!("sam-pair-0-{j}")),
                    check_pairwise_sam_dynamics(&spec, &cores, &obj, SAM_RHO, SAM_ETA, 0, j).map_err(ctx)?,
                ));
            }
            checks.push((tag("das"), check_das_matches_sam(&spec, &cores, &obj, SAM_RHO, DAS_ETA).map_err(ctx)?));
        }
        let (model, obj) = layered_instance(seed)?;
        for layer in 0..model.num_layers() {
            checks.push((
                format!("seed{seed}/layered/layer{layer}"),
                check_layerwise_q(&model, &obj, SAM_RHO, SAM_ETA, layer)?,
            ));
        }
        let (spec, cores, obj) = imbalanced_mf_instance(seed)?;
        observations.push((
            format!("seed{seed}/mf/pairwise-gap"),
            observe_shrinkage(&spec, &cores, &obj, SAM_RHO, SAM_ETA, SHRINK_STEPS, Some((0, 1)))?,
        ));
    }
    Ok(SuiteOutcome {
        base_seed,
        checks,
        observations,
    })
}
