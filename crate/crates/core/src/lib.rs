//! Scale-invariant tensor-core models, SAM and DAS optimizers, and
//! diagnostics for the norm dynamics they induce.
//!
//! A model is a [`ReconstructionSpec`] (how the cores contract into the
//! output tensor) plus a [`CoreSet`] (the trainable cores). Objectives map
//! the reconstructed tensor to a loss and its gradient; optimizers update
//! the cores; [`diagnostics`] measures the norm deviation `Q` and checks its
//! one-step dynamics against the gradient-flow predictions.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{CoreSet, Layer, LayeredModel, ModelFamily, Operand, ReconstructionSpec};
pub use objective::{ChainRegressionObjective, MaskedMseObjective, NoisyTargetObjective, Objective};
pub use optim::{Optimizer, OptimizerConfig, Schedule};
pub use tensor::{ContractionPlan, DenseTensor, Shape};
