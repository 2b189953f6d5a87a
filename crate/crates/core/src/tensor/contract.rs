//! Label-based contraction of several dense tensors.
//!
//! A plan such as `"ij,jk->ik"` names the axes of each operand. A label that
//! occurs on two operands is summed; a label that occurs once is free and must
//! be listed in the output. Operands are folded strictly left to right, each
//! fold being a permute-then-matmul over the labels the pair shares.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{ensure_finite, permute_data, DenseTensor, Shape};
use crate::error::{Error, Result};

pub type Label = char;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionPlan {
    operands: Vec<Vec<Label>>,
    output: Vec<Label>,
}

impl ContractionPlan {
    pub fn new(operands: Vec<Vec<Label>>, output: Vec<Label>) -> Result<Self> {
        if operands.is_empty() {
            return Err(Error::LabelError("plan has no operands".into()));
        }
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for (slot, labels) in operands.iter().enumerate() {
            for (pos, &l) in labels.iter().enumerate() {
                if labels[..pos].contains(&l) {
                    return Err(Error::LabelError(format!(
                        "label '{l}' repeated within operand {slot}"
                    )));
                }
                *counts.entry(l).or_default() += 1;
            }
        }
        for (pos, &l) in output.iter().enumerate() {
            if output[..pos].contains(&l) {
                return Err(Error::LabelError(format!("output label '{l}' repeated")));
            }
            match counts.get(&l) {
                None => {
                    return Err(Error::LabelError(format!(
                        "output label '{l}' does not appear on any operand"
                    )))
                }
                Some(2) => {
                    return Err(Error::LabelError(format!(
                        "label '{l}' is summed over two operands and cannot also be an output"
                    )))
                }
                _ => {}
            }
        }
        for (&l, &c) in &counts {
            if c > 2 {
                return Err(Error::LabelError(format!(
                    "label '{l}' appears on {c} operands; at most two are allowed"
                )));
            }
            if c == 1 && !output.contains(&l) {
                return Err(Error::LabelError(format!(
                    "free label '{l}' is missing from the output"
                )));
            }
        }
        Ok(ContractionPlan { operands, output })
    }

    pub fn operands(&self) -> &[Vec<Label>] {
        &self.operands
    }

    pub fn output(&self) -> &[Label] {
        &self.output
    }

    pub fn num_operands(&self) -> usize {
        self.operands.len()
    }

    /// Extent of every label, checked for agreement across occurrences.
    pub fn label_extents(&self, shapes: &[&Shape]) -> Result<BTreeMap<Label, usize>> {
        if shapes.len() != self.operands.len() {
            return Err(Error::ShapeMismatch(format!(
                "plan {self} expects {} operands, got {}",
                self.operands.len(),
                shapes.len()
            )));
        }
        let mut extents = BTreeMap::new();
        for (slot, (labels, shape)) in self.operands.iter().zip(shapes).enumerate() {
            if labels.len() != shape.rank() {
                return Err(Error::ShapeMismatch(format!(
                    "operand {slot} of {self} has {} labels but shape {shape}",
                    labels.len()
                )));
            }
            for (&l, &d) in labels.iter().zip(shape.dims()) {
                match extents.insert(l, d) {
                    Some(prev) if prev != d => {
                        return Err(Error::ShapeMismatch(format!(
                            "label '{l}' has extent {prev} and {d}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(extents)
    }

    pub fn output_shape(&self, shapes: &[&Shape]) -> Result<Shape> {
        let extents = self.label_extents(shapes)?;
        Shape::new(self.output.iter().map(|l| extents[l]).collect::<Vec<_>>())
    }
}

impl FromStr for ContractionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = compact
            .split_once("->")
            .ok_or_else(|| Error::LabelError(format!("plan '{s}' has no '->'")))?;
        let parse_labels = |part: &str| -> Result<Vec<Label>> {
            part.chars()
                .map(|c| {
                    if c.is_alphanumeric() {
                        Ok(c)
                    } else {
                        Err(Error::LabelError(format!("invalid label '{c}' in plan '{s}'")))
                    }
                })
                .collect()
        };
        let operands = lhs.split(',').map(parse_labels).collect::<Result<Vec<_>>>()?;
        ContractionPlan::new(operands, parse_labels(rhs)?)
    }
}

impl fmt::Display for ContractionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, labels) in self.operands.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            for l in labels {
                write!(f, "{l}")?;
            }
        }
        write!(f, "->")?;
        for l in &self.output {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Evaluates `plan` on `inputs`.
pub fn contract(plan: &ContractionPlan, inputs: &[&DenseTensor]) -> Result<DenseTensor> {
    let shapes: Vec<&Shape> = inputs.iter().map(|t| t.shape()).collect();
    let extents = plan.label_extents(&shapes)?;

    let mut acc_labels = plan.operands[0].clone();
    let mut acc_data = inputs[0].data().to_vec();
    for (labels, tensor) in plan.operands.iter().zip(inputs).skip(1) {
        let (l, d) = pairwise(&acc_labels, &acc_data, labels, tensor.data(), &extents);
        acc_labels = l;
        acc_data = d;
    }

    let axes: Vec<usize> = plan
        .output
        .iter()
        .map(|l| acc_labels.iter().position(|a| a == l).expect("validated free label"))
        .collect();
    let acc_dims: Vec<usize> = acc_labels.iter().map(|l| extents[l]).collect();
    let data = permute_data(&acc_data, &acc_dims, &axes);
    ensure_finite(&data, "contract")?;
    let shape = Shape::new(plan.output.iter().map(|l| extents[l]).collect::<Vec<_>>())?;
    Ok(DenseTensor::from_parts_unchecked(shape, data))
}

fn pairwise(
    a_labels: &[Label],
    a: &[f64],
    b_labels: &[Label],
    b: &[f64],
    extents: &BTreeMap<Label, usize>,
) -> (Vec<Label>, Vec<f64>) {
    let shared: Vec<Label> = a_labels.iter().copied().filter(|l| b_labels.contains(l)).collect();
    let free_a: Vec<Label> = a_labels.iter().copied().filter(|l| !shared.contains(l)).collect();
    let free_b: Vec<Label> = b_labels.iter().copied().filter(|l| !shared.contains(l)).collect();

    let pos = |labels: &[Label], l: &Label| labels.iter().position(|x| x == l).unwrap();
    let a_axes: Vec<usize> = free_a.iter().chain(&shared).map(|l| pos(a_labels, l)).collect();
    let b_axes: Vec<usize> = shared.iter().chain(&free_b).map(|l| pos(b_labels, l)).collect();
    let a_dims: Vec<usize> = a_labels.iter().map(|l| extents[l]).collect();
    let b_dims: Vec<usize> = b_labels.iter().map(|l| extents[l]).collect();

    let a_mat = permute_data(a, &a_dims, &a_axes);
    let b_mat = permute_data(b, &b_dims, &b_axes);
    let m: usize = free_a.iter().map(|l| extents[l]).product();
    let k: usize = shared.iter().map(|l| extents[l]).product();
    let n: usize = free_b.iter().map(|l| extents[l]).product();

    let out = matmul(&a_mat, &b_mat, m, k, n);
    let mut labels = free_a;
    labels.extend(free_b);
    (labels, out)
}

/// Row-major `(m x k) * (k x n)`; each output entry sums over `k` in order.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (row, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = &a[row * k..(row + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> DenseTensor {
        DenseTensor::new(dims, data.to_vec()).unwrap()
    }

    fn plan(s: &str) -> ContractionPlan {
        s.parse().unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = DenseTensor::identity(2).unwrap();
        assert_eq!(contract(&plan("ij,jk->ik"), &[&a, &i]).unwrap(), a);
    }

    #[test]
    fn dot_product() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let y = t(&[3], &[4.0, 5.0, 6.0]);
        let r = contract(&plan("i,i->"), &[&x, &y]).unwrap();
        assert_eq!(r.rank(), 0);
        assert_eq!(r.data(), &[32.0]);
    }

    #[test]
    fn transpose_and_outer_product() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = contract(&plan("ij->ji"), &[&a]).unwrap();
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let x = t(&[2], &[1.0, 2.0]);
        let y = t(&[2], &[3.0, 4.0]);
        let o = contract(&plan("i,j->ij"), &[&x, &y]).unwrap();
        assert_eq!(o.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn label_errors() {
        assert!(matches!("ij,jk,jl->ikl".parse::<ContractionPlan>(), Err(Error::LabelError(_))));
        assert!(matches!("ij,jk->i".parse::<ContractionPlan>(), Err(Error::LabelError(_))));
        assert!(matches!("ii->i".parse::<ContractionPlan>(), Err(Error::LabelError(_))));
        assert!(matches!("ij,jk->ijk".parse::<ContractionPlan>(), Err(Error::LabelError(_))));
        assert!(matches!("ij->ijz".parse::<ContractionPlan>(), Err(Error::LabelError(_))));
        assert!(matches!("ij".parse::<ContractionPlan>(), Err(Error::LabelError(_))));
    }

    #[test]
    fn extent_conflict() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            contract(&plan("ij,jk->ik"), &[&a, &b]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            contract(&plan("ij,jk->ik"), &[&a]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn display_round_trips() {
        let p = plan("ab, bc ,ca->");
        assert_eq!(p.to_string(), "ab,bc,ca->");
        assert_eq!(p.to_string().parse::<ContractionPlan>().unwrap(), p);
    }
}
