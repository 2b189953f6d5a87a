//! Stacks of independently parameterised layers.
//!
//! Layer `l` reconstructs a tensor that is read row-major as a
//! `rows × cols` weight matrix `W_l`. The model maps an input `x` to
//! `W_D ··· W_2 W_1 x`, so `cols` of each layer must equal `rows` of the
//! layer below it.

use super::{grad_cores_from, reconstruct_from, CoreSet, ReconstructionSpec};
use crate::error::{Error, Result};
use crate::objective::ChainRegressionObjective;
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: ReconstructionSpec,
    pub cores: CoreSet,
    rows: usize,
    cols: usize,
}

impl Layer {
    pub fn new(spec: ReconstructionSpec, cores: CoreSet, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != spec.output_shape().numel() {
            return Err(Error::ShapeMismatch(format!(
                "layer output {} cannot be read as a {rows}x{cols} matrix",
                spec.output_shape()
            )));
        }
        // revalidate in case the caller built cores for another spec
        let cores = CoreSet::new(&spec, cores.into_cores())?;
        Ok(Layer {
            spec,
            cores,
            rows,
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub(crate) fn weight_from(&self, cores: &[DenseTensor]) -> Result<DenseTensor> {
        reconstruct_from(&self.spec, cores)?.reshape(&[self.rows, self.cols])
    }

    pub fn weight(&self) -> Result<DenseTensor> {
        self.weight_from(self.cores.cores())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredModel {
    layers: Vec<Layer>,
}

impl LayeredModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a layered model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} produces {} features but layer {} expects {}",
                    pair[0].rows,
                    l + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(LayeredModel { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn weights(&self) -> Result<Vec<DenseTensor>> {
        self.layers.iter().map(Layer::weight).collect()
    }

    /// `||G_{k,l}||²` grouped by layer.
    pub fn norms_sq(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.cores.norms_sq()).collect()
    }

    pub fn core_sets(&self) -> Vec<Vec<DenseTensor>> {
        self.layers.iter().map(|l| l.cores.cores().to_vec()).collect()
    }

    /// Loss and per-layer, per-core gradients at the given cores (which need
    /// not be the model's own).
    pub fn loss_and_grads_at(
        &self,
        cores: &[Vec<DenseTensor>],
        objective: &ChainRegressionObjective,
    ) -> Result<(f64, Vec<Vec<DenseTensor>>)> {
        if cores.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                left: cores.len(),
                right: self.layers.len(),
            });
        }
        let weights = self
            .layers
            .iter()
            .zip(cores)
            .map(|(layer, c)| layer.weight_from(c))
            .collect::<Result<Vec<_>>>()?;
        let (loss, weight_grads) = objective.loss_and_grads(&weights)?;
        let grads = self
            .layers
            .iter()
            .zip(cores)
            .zip(weight_grads)
            .map(|((layer, c), gw)| {
                let gt = gw.reshape(layer.spec.output_shape().dims())?;
                grad_cores_from(&layer.spec, c, &gt)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, grads))
    }

    pub fn loss_and_grads(
        &self,
        objective: &ChainRegressionObjective,
    ) -> Result<(f64, Vec<Vec<DenseTensor>>)> {
        self.loss_and_grads_at(&self.core_sets(), objective)
    }
}
