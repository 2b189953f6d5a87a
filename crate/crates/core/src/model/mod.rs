//! Multilinear reconstruction models and their per-core gradients.
//!
//! A [`ReconstructionSpec`] is a contraction plan whose operand slots are
//! either trainable cores or fixed tensors (the superdiagonal of a CP model).
//! Because the map is linear in each core, the gradient with respect to core
//! `m` is the contraction of the output gradient with every other operand,
//! i.e. the same network with a hole where core `m` used to be.

mod families;
mod layered;

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{contract, frobenius_inner, frobenius_norm_sq, ContractionPlan, DenseTensor, Label, Shape};

pub use families::ModelFamily;
pub use layered::{Layer, LayeredModel};

/// Source of one operand slot of the plan.
#[derive(Clone, Debug, PartialEq)]
pub enum Operand {
    Core(usize),
    Fixed(DenseTensor),
}

#[derive(Clone, Debug, PartialEq)]
enum HoleInput {
    Slot(usize),
    OutputGrad,
}

#[derive(Clone, Debug, PartialEq)]
struct HolePlan {
    plan: ContractionPlan,
    inputs: Vec<HoleInput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionSpec {
    family: ModelFamily,
    plan: ContractionPlan,
    operands: Vec<Operand>,
    core_shapes: Vec<Shape>,
    output_shape: Shape,
    holes: Vec<HolePlan>,
}

impl ReconstructionSpec {
    /// Builds a spec from a plan, one operand source per plan slot, and the
    /// shape of every core. Each core index must fill exactly one slot.
    pub fn new(
        family: ModelFamily,
        plan: ContractionPlan,
        operands: Vec<Operand>,
        core_shapes: Vec<Shape>,
    ) -> Result<Self> {
        if operands.len() != plan.num_operands() {
            return Err(Error::ShapeMismatch(format!(
                "plan {plan} has {} slots but {} operand sources were given",
                plan.num_operands(),
                operands.len()
            )));
        }
        let k = core_shapes.len();
        if k == 0 {
            return Err(Error::InvalidArgument("a model needs at least one core".into()));
        }
        let mut slot_of_core = vec![None; k];
        for (slot, op) in operands.iter().enumerate() {
            if let Operand::Core(c) = op {
                let entry = slot_of_core.get_mut(*c).ok_or_else(|| {
                    Error::InvalidArgument(format!("slot {slot} refers to core {c} of {k}"))
                })?;
                if entry.replace(slot).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "core {c} fills more than one slot; the map would not be multilinear"
                    )));
                }
            }
        }
        if let Some(c) = slot_of_core.iter().position(Option::is_none) {
            return Err(Error::InvalidArgument(format!("core {c} fills no slot")));
        }

        let shapes: Vec<&Shape> = operands
            .iter()
            .map(|op| match op {
                Operand::Core(c) => &core_shapes[*c],
                Operand::Fixed(t) => t.shape(),
            })
            .collect();
        let output_shape = plan.output_shape(&shapes)?;

        let holes = slot_of_core
            .iter()
            .map(|slot| hole_plan(&plan, slot.unwrap()))
            .collect::<Result<Vec<_>>>()?;

        Ok(ReconstructionSpec {
            family,
            plan,
            operands,
            core_shapes,
            output_shape,
            holes,
        })
    }

    /// A user-supplied plan whose operands are cores `0..K` in order.
    pub fn custom(plan: &str, core_shapes: Vec<Shape>) -> Result<Self> {
        let plan: ContractionPlan = plan.parse()?;
        let operands = (0..plan.num_operands()).map(Operand::Core).collect();
        ReconstructionSpec::new(ModelFamily::Custom, plan, operands, core_shapes)
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn plan(&self) -> &ContractionPlan {
        &self.plan
    }

    pub fn operands(&self) -> &[Operand] {
        &self.operands
    }

    pub fn num_cores(&self) -> usize {
        self.core_shapes.len()
    }

    pub fn core_shapes(&self) -> &[Shape] {
        &self.core_shapes
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    fn inputs<'a>(&'a self, cores: &'a [DenseTensor]) -> Vec<&'a DenseTensor> {
        self.operands
            .iter()
            .map(|op| match op {
                Operand::Core(c) => &cores[*c],
                Operand::Fixed(t) => t,
            })
            .collect()
    }
}

impl fmt::Display for ReconstructionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] cores:", self.family, self.plan)?;
        for s in &self.core_shapes {
            write!(f, " {s}")?;
        }
        Ok(())
    }
}

/// Network for the gradient of the core in `slot`: the output gradient plus
/// every other operand, producing the core's labels. Operands are ordered
/// greedily so each one shares a label with what has been contracted so far.
fn hole_plan(plan: &ContractionPlan, slot: usize) -> Result<HolePlan> {
    let mut remaining: Vec<usize> = (0..plan.num_operands()).filter(|&s| s != slot).collect();
    let mut acc: Vec<Label> = plan.output().to_vec();
    let mut operands = vec![plan.output().to_vec()];
    let mut inputs = vec![HoleInput::OutputGrad];
    while !remaining.is_empty() {
        let pick = remaining
            .iter()
            .position(|&s| plan.operands()[s].iter().any(|l| acc.contains(l)))
            .unwrap_or(0);
        let s = remaining.remove(pick);
        let labels = &plan.operands()[s];
        let shared: Vec<Label> = acc.iter().copied().filter(|l| labels.contains(l)).collect();
        acc.retain(|l| !shared.contains(l));
        acc.extend(labels.iter().copied().filter(|l| !shared.contains(l)));
        operands.push(labels.clone());
        inputs.push(HoleInput::Slot(s));
    }
    let plan = ContractionPlan::new(operands, plan.operands()[slot].clone())?;
    Ok(HolePlan { plan, inputs })
}

/// The trainable cores of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreSet {
    cores: Vec<DenseTensor>,
}

impl CoreSet {
    pub fn new(spec: &ReconstructionSpec, cores: Vec<DenseTensor>) -> Result<Self> {
        check_core_shapes(spec, &cores)?;
        Ok(CoreSet { cores })
    }

    /// Cores with i.i.d. N(0, scale²) entries.
    pub fn random<R: Rng + ?Sized>(spec: &ReconstructionSpec, scale: f64, rng: &mut R) -> Self {
        let cores = spec
            .core_shapes()
            .iter()
            .map(|s| DenseTensor::random_normal(s.clone(), scale, rng))
            .collect();
        CoreSet { cores }
    }

    pub fn len(&self) -> usize {
        self.cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.is_empty()
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &DenseTensor {
        &self.cores[k]
    }

    pub fn into_cores(self) -> Vec<DenseTensor> {
        self.cores
    }

    pub(crate) fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    /// Replaces core `k`, keeping its shape.
    pub fn replace(&mut self, k: usize, core: DenseTensor) -> Result<DenseTensor> {
        let slot = self
            .cores
            .get_mut(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no core {k}")))?;
        if slot.shape() != core.shape() {
            return Err(Error::ShapeMismatch(format!(
                "core {k} has shape {} but replacement has {}",
                slot.shape(),
                core.shape()
            )));
        }
        Ok(std::mem::replace(slot, core))
    }

    /// `||G_k||²` for every core.
    pub fn norms_sq(&self) -> Vec<f64> {
        self.cores.iter().map(frobenius_norm_sq).collect()
    }

    /// Multiplies core `k` by `scalars[k]`.
    pub fn scaled(&self, scalars: &[f64]) -> Result<CoreSet> {
        if scalars.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: scalars.len(),
                right: self.len(),
            });
        }
        let cores = self
            .cores
            .iter()
            .zip(scalars)
            .map(|(g, &c)| g.scale(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoreSet { cores })
    }

    /// Rescales the cores to equal Frobenius norms while keeping the product
    /// of the scalings at one, so the reconstruction is unchanged.
    pub fn balanced(&self) -> Result<CoreSet> {
        let norms: Vec<f64> = self.norms_sq().iter().map(|s| s.sqrt()).collect();
        if let Some(k) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroCoreNorm { core: k });
        }
        let log_mean = norms.iter().map(|n| n.ln()).sum::<f64>() / norms.len() as f64;
        let target = log_mean.exp();
        let scalars: Vec<f64> = norms.iter().map(|n| target / n).collect();
        self.scaled(&scalars)
    }
}

fn check_core_shapes(spec: &ReconstructionSpec, cores: &[DenseTensor]) -> Result<()> {
    if cores.len() != spec.num_cores() {
        return Err(Error::ShapeMismatch(format!(
            "spec has {} cores but {} were given",
            spec.num_cores(),
            cores.len()
        )));
    }
    for (k, (core, shape)) in cores.iter().zip(spec.core_shapes()).enumerate() {
        if core.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "core {k} has shape {} but the spec declares {shape}",
                core.shape()
            )));
        }
    }
    Ok(())
}

/// `T = Φ(G_1, ..., G_K)`.
pub fn reconstruct(spec: &ReconstructionSpec, cores: &CoreSet) -> Result<DenseTensor> {
    reconstruct_from(spec, cores.cores())
}

pub(crate) fn reconstruct_from(spec: &ReconstructionSpec, cores: &[DenseTensor]) -> Result<DenseTensor> {
    check_core_shapes(spec, cores)?;
    contract(&spec.plan, &spec.inputs(cores))
}

/// Per-core gradients `∇_{G_k} f` given `∇_T f`.
pub fn grad_cores(
    spec: &ReconstructionSpec,
    cores: &CoreSet,
    output_grad: &DenseTensor,
) -> Result<Vec<DenseTensor>> {
    grad_cores_from(spec, cores.cores(), output_grad)
}

pub(crate) fn grad_cores_from(
    spec: &ReconstructionSpec,
    cores: &[DenseTensor],
    output_grad: &DenseTensor,
) -> Result<Vec<DenseTensor>> {
    check_core_shapes(spec, cores)?;
    if output_grad.shape() != &spec.output_shape {
        return Err(Error::ShapeMismatch(format!(
            "output gradient has shape {} but the model produces {}",
            output_grad.shape(),
            spec.output_shape
        )));
    }
    let slots = spec.inputs(cores);
    spec.holes
        .iter()
        .map(|hole| {
            let inputs: Vec<&DenseTensor> = hole
                .inputs
                .iter()
                .map(|h| match h {
                    HoleInput::Slot(s) => slots[*s],
                    HoleInput::OutputGrad => output_grad,
                })
                .collect();
            contract(&hole.plan, &inputs)
        })
        .collect()
}

/// Outcome of [`check_scale_invariance`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleInvarianceCheck {
    pub residual: f64,
    /// `true` when `Φ(G)` is identically zero and `residual` is absolute.
    pub degenerate: bool,
}

/// `||Φ({c_k G_k}) − Φ({G_k})||_F / ||Φ({G_k})||_F` for scalings with unit product.
pub fn check_scale_invariance(
    spec: &ReconstructionSpec,
    cores: &CoreSet,
    scalars: &[f64],
) -> Result<ScaleInvarianceCheck> {
    let product: f64 = scalars.iter().product();
    if (product - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "scalings must multiply to one, got {product}"
        )));
    }
    let base = reconstruct(spec, cores)?;
    let moved = reconstruct(spec, &cores.scaled(scalars)?)?;
    let diff = frobenius_norm_sq(&crate::tensor::axpy_scale(&moved, 1.0, &base, -1.0)?).sqrt();
    let norm = frobenius_norm_sq(&base).sqrt();
    Ok(if norm == 0.0 {
        ScaleInvarianceCheck {
            residual: diff,
            degenerate: true,
        }
    } else {
        ScaleInvarianceCheck {
            residual: diff / norm,
            degenerate: false,
        }
    })
}

/// Residual of `⟨Φ(.., V, ..), ∇_T f⟩ = ⟨V, ∇_{G_m} f⟩` with `V` in slot `m`,
/// normalised as `|lhs − rhs| / (1 + |rhs|)`.
pub fn check_directional_identity(
    spec: &ReconstructionSpec,
    cores: &CoreSet,
    m: usize,
    direction: &DenseTensor,
    output_grad: &DenseTensor,
) -> Result<f64> {
    if m >= cores.len() {
        return Err(Error::InvalidArgument(format!("no core {m}")));
    }
    let mut swapped = cores.clone();
    swapped.replace(m, direction.clone())?;
    let lhs = frobenius_inner(&reconstruct(spec, &swapped)?, output_grad)?;
    let grads = grad_cores(spec, cores, output_grad)?;
    let rhs = frobenius_inner(direction, &grads[m])?;
    Ok((lhs - rhs).abs() / (1.0 + rhs.abs()))
}
