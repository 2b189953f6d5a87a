use std::fmt;
use std::str::FromStr;

use super::{Operand, ReconstructionSpec};
use crate::error::{Error, Result};
use crate::tensor::{ContractionPlan, DenseTensor, Label, Shape};

const MODE_LABELS: &[Label] = &['i', 'j', 'k', 'l', 'm', 'n'];
const RANK_LABELS: &[Label] = &['a', 'b', 'c', 'd', 'e', 'f'];
const CP_LABELS: &[Label] = &['p', 'q', 's', 't', 'u', 'v'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    Cp,
    Tucker,
    Tucker2,
    TensorTrain,
    TensorRing,
    Custom,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Cp => "cp",
            ModelFamily::Tucker => "tucker",
            ModelFamily::Tucker2 => "tucker2",
            ModelFamily::TensorTrain => "tt",
            ModelFamily::TensorRing => "tr",
            ModelFamily::Custom => "custom",
        }
    }

    pub const SHIPPED: [ModelFamily; 5] = [
        ModelFamily::Cp,
        ModelFamily::Tucker,
        ModelFamily::Tucker2,
        ModelFamily::TensorTrain,
        ModelFamily::TensorRing,
    ];
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cp" => ModelFamily::Cp,
            "tucker" => ModelFamily::Tucker,
            "tucker2" => ModelFamily::Tucker2,
            "tt" => ModelFamily::TensorTrain,
            "tr" => ModelFamily::TensorRing,
            "custom" => ModelFamily::Custom,
            other => return Err(Error::Parse(format!("unknown model family '{other}'"))),
        })
    }
}

fn shape(dims: Vec<usize>) -> Result<Shape> {
    Shape::new(dims)
}

fn check_order(modes: &[usize], min: usize) -> Result<()> {
    if modes.len() < min || modes.len() > MODE_LABELS.len() {
        return Err(Error::InvalidArgument(format!(
            "order {} outside the supported range {min}..={}",
            modes.len(),
            MODE_LABELS.len()
        )));
    }
    Ok(())
}

fn check_ranks(ranks: &[usize], expected: usize) -> Result<()> {
    if ranks.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} ranks, got {}",
            ranks.len()
        )));
    }
    Ok(())
}

impl ReconstructionSpec {
    /// CP model `T = Σ_r a_r ⊗ b_r ⊗ ...`: one `(n_i, rank)` factor per mode,
    /// contracted through a fixed superdiagonal tensor.
    pub fn cp(modes: &[usize], rank: usize) -> Result<Self> {
        check_order(modes, 2)?;
        let d = modes.len();
        let mut diag = DenseTensor::zeros(shape(vec![rank; d])?);
        let stride: usize = (0..d).map(|i| rank.pow(i as u32)).sum();
        for r in 0..rank {
            diag.data_mut()[r * stride] = 1.0;
        }
        let mut operands = vec![CP_LABELS[..d].to_vec()];
        let mut sources = vec![Operand::Fixed(diag)];
        let mut core_shapes = Vec::with_capacity(d);
        for (i, &n) in modes.iter().enumerate() {
            operands.push(vec![MODE_LABELS[i], CP_LABELS[i]]);
            sources.push(Operand::Core(i));
            core_shapes.push(shape(vec![n, rank])?);
        }
        let plan = ContractionPlan::new(operands, MODE_LABELS[..d].to_vec())?;
        ReconstructionSpec::new(ModelFamily::Cp, plan, sources, core_shapes)
    }

    /// Tucker model with core `G` first, then one `(n_i, r_i)` factor per mode.
    pub fn tucker(modes: &[usize], ranks: &[usize]) -> Result<Self> {
        check_order(modes, 2)?;
        let d = modes.len();
        check_ranks(ranks, d)?;
        let mut operands = vec![RANK_LABELS[..d].to_vec()];
        let mut core_shapes = vec![shape(ranks.to_vec())?];
        for i in 0..d {
            operands.push(vec![MODE_LABELS[i], RANK_LABELS[i]]);
            core_shapes.push(shape(vec![modes[i], ranks[i]])?);
        }
        let plan = ContractionPlan::new(operands, MODE_LABELS[..d].to_vec())?;
        let sources = (0..=d).map(Operand::Core).collect();
        ReconstructionSpec::new(ModelFamily::Tucker, plan, sources, core_shapes)
    }

    /// Matrix model `T = A · G · B` with `A: (rows, r1)`, `G: (r1, r2)`, `B: (r2, cols)`.
    pub fn tucker2(rows: usize, r1: usize, r2: usize, cols: usize) -> Result<Self> {
        let plan: ContractionPlan = "ia,ab,bj->ij".parse()?;
        let core_shapes = vec![shape(vec![rows, r1])?, shape(vec![r1, r2])?, shape(vec![r2, cols])?];
        let sources = (0..3).map(Operand::Core).collect();
        ReconstructionSpec::new(ModelFamily::Tucker2, plan, sources, core_shapes)
    }

    /// Tensor train with boundary ranks of one. `ranks` holds the `d − 1`
    /// internal bond dimensions; end cores are matrices.
    pub fn tt(modes: &[usize], ranks: &[usize]) -> Result<Self> {
        check_order(modes, 2)?;
        let d = modes.len();
        check_ranks(ranks, d - 1)?;
        let mut operands = Vec::with_capacity(d);
        let mut core_shapes = Vec::with_capacity(d);
        for i in 0..d {
            let mut labels = Vec::new();
            let mut dims = Vec::new();
            if i > 0 {
                labels.push(RANK_LABELS[i - 1]);
                dims.push(ranks[i - 1]);
            }
            labels.push(MODE_LABELS[i]);
            dims.push(modes[i]);
            if i + 1 < d {
                labels.push(RANK_LABELS[i]);
                dims.push(ranks[i]);
            }
            operands.push(labels);
            core_shapes.push(shape(dims)?);
        }
        let plan = ContractionPlan::new(operands, MODE_LABELS[..d].to_vec())?;
        let sources = (0..d).map(Operand::Core).collect();
        ReconstructionSpec::new(ModelFamily::TensorTrain, plan, sources, core_shapes)
    }

    /// Tensor ring: core `i` has shape `(ranks[i], n_i, ranks[i + 1])` with the
    /// last bond closing back onto `ranks[0]`. Contraction runs left to right
    /// and the closing bond is summed when the last core is folded in.
    pub fn tr(modes: &[usize], ranks: &[usize]) -> Result<Self> {
        check_order(modes, 2)?;
        let d = modes.len();
        check_ranks(ranks, d)?;
        let mut operands = Vec::with_capacity(d);
        let mut core_shapes = Vec::with_capacity(d);
        for i in 0..d {
            let next = (i + 1) % d;
            operands.push(vec![RANK_LABELS[i], MODE_LABELS[i], RANK_LABELS[next]]);
            core_shapes.push(shape(vec![ranks[i], modes[i], ranks[next]])?);
        }
        let plan = ContractionPlan::new(operands, MODE_LABELS[..d].to_vec())?;
        let sources = (0..d).map(Operand::Core).collect();
        ReconstructionSpec::new(ModelFamily::TensorRing, plan, sources, core_shapes)
    }

    /// Builds a shipped family from mode sizes and ranks.
    ///
    /// `tucker2` takes `modes = [rows, cols]` and `ranks = [r1, r2]`; `cp`
    /// takes a single rank.
    pub fn from_family(family: ModelFamily, modes: &[usize], ranks: &[usize]) -> Result<Self> {
        match family {
            ModelFamily::Cp => {
                check_ranks(ranks, 1)?;
                ReconstructionSpec::cp(modes, ranks[0])
            }
            ModelFamily::Tucker => ReconstructionSpec::tucker(modes, ranks),
            ModelFamily::Tucker2 => {
                if modes.len() != 2 {
                    return Err(Error::InvalidArgument("tucker2 needs exactly two mode sizes".into()));
                }
                check_ranks(ranks, 2)?;
                ReconstructionSpec::tucker2(modes[0], ranks[0], ranks[1], modes[1])
            }
            ModelFamily::TensorTrain => ReconstructionSpec::tt(modes, ranks),
            ModelFamily::TensorRing => ReconstructionSpec::tr(modes, ranks),
            ModelFamily::Custom => Err(Error::InvalidArgument(
                "custom models are built from a plan, not from ranks".into(),
            )),
        }
    }
}
