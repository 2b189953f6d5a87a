//! Scalar losses over the reconstructed tensor, plus the R² metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{axpy_scale, contract, ContractionPlan, DenseTensor, Shape};

/// A differentiable loss `f(T)`.
pub trait Objective {
    fn target_shape(&self) -> &Shape;

    /// `(f(T), ∇_T f)`.
    fn loss_and_grad(&self, t: &DenseTensor) -> Result<(f64, DenseTensor)>;

    /// Advances any stochastic state. Optimizers call this once at the start
    /// of every step, so both gradient passes of a SAM step see one draw.
    fn next_sample(&mut self) {}
}

fn check_shape(expected: &Shape, t: &DenseTensor) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "objective expects {expected}, got {}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_binary(mask: &DenseTensor) -> Result<usize> {
    let mut observed = 0;
    for &m in mask.data() {
        if m == 1.0 {
            observed += 1;
        } else if m != 0.0 {
            return Err(Error::InvalidArgument(format!("mask entry {m} is not 0 or 1")));
        }
    }
    Ok(observed)
}

/// Mean squared error over observed entries: `(1/n) Σ_mask (T − Y)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedMseObjective {
    target: DenseTensor,
    mask: DenseTensor,
    normalizer: usize,
}

impl MaskedMseObjective {
    pub fn new(target: DenseTensor, mask: DenseTensor) -> Result<Self> {
        if target.shape() != mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "target {} vs mask {}",
                target.shape(),
                mask.shape()
            )));
        }
        let normalizer = check_binary(&mask)?;
        if normalizer == 0 {
            return Err(Error::InvalidArgument("mask observes no entries".into()));
        }
        Ok(MaskedMseObjective {
            target,
            mask,
            normalizer,
        })
    }

    /// Every entry observed.
    pub fn full(target: DenseTensor) -> Result<Self> {
        let mask = DenseTensor::filled(target.shape().clone(), 1.0)?;
        MaskedMseObjective::new(target, mask)
    }

    pub fn target(&self) -> &DenseTensor {
        &self.target
    }

    pub fn mask(&self) -> &DenseTensor {
        &self.mask
    }

    pub fn normalizer(&self) -> usize {
        self.normalizer
    }
}

impl Objective for MaskedMseObjective {
    fn target_shape(&self) -> &Shape {
        self.target.shape()
    }

    fn loss_and_grad(&self, t: &DenseTensor) -> Result<(f64, DenseTensor)> {
        check_shape(self.target.shape(), t)?;
        let n = self.normalizer as f64;
        let mut loss = 0.0;
        let grad: Vec<f64> = t
            .data()
            .iter()
            .zip(self.target.data())
            .zip(self.mask.data())
            .map(|((&x, &y), &m)| {
                let r = m * (x - y);
                loss += r * r;
                2.0 * r / n
            })
            .collect();
        Ok((loss / n, DenseTensor::from_vec(t.shape().clone(), grad)?))
    }
}

/// `||T − (T* + αN)||²_F` with Gaussian `N`, optionally redrawn every step.
#[derive(Clone, Debug)]
pub struct NoisyTargetObjective {
    clean_target: DenseTensor,
    noise: DenseTensor,
    alpha: f64,
    resample_each_step: bool,
    rng: ChaCha8Rng,
}

impl NoisyTargetObjective {
    /// Draws the initial noise from a generator seeded with `seed`.
    pub fn new(clean_target: DenseTensor, alpha: f64, resample_each_step: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = DenseTensor::random_normal(clean_target.shape().clone(), 1.0, &mut rng);
        NoisyTargetObjective {
            clean_target,
            noise,
            alpha,
            resample_each_step,
            rng,
        }
    }

    /// Frozen objective with a caller-provided noise draw.
    pub fn with_noise(clean_target: DenseTensor, noise: DenseTensor, alpha: f64) -> Result<Self> {
        if clean_target.shape() != noise.shape() {
            return Err(Error::ShapeMismatch(format!(
                "target {} vs noise {}",
                clean_target.shape(),
                noise.shape()
            )));
        }
        Ok(NoisyTargetObjective {
            clean_target,
            noise,
            alpha,
            resample_each_step: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn noise(&self) -> &DenseTensor {
        &self.noise
    }

    pub fn clean_target(&self) -> &DenseTensor {
        &self.clean_target
    }

    pub fn resamples(&self) -> bool {
        self.resample_each_step
    }

    /// `T* + αN` for the current draw.
    pub fn noisy_target(&self) -> Result<DenseTensor> {
        axpy_scale(&self.clean_target, 1.0, &self.noise, self.alpha)
    }
}

impl Objective for NoisyTargetObjective {
    fn target_shape(&self) -> &Shape {
        self.clean_target.shape()
    }

    fn loss_and_grad(&self, t: &DenseTensor) -> Result<(f64, DenseTensor)> {
        check_shape(self.clean_target.shape(), t)?;
        let mut loss = 0.0;
        let grad: Vec<f64> = t
            .data()
            .iter()
            .zip(self.clean_target.data())
            .zip(self.noise.data())
            .map(|((&x, &y), &nz)| {
                let r = x - (y + self.alpha * nz);
                loss += r * r;
                2.0 * r
            })
            .collect();
        Ok((loss, DenseTensor::from_vec(t.shape().clone(), grad)?))
    }

    fn next_sample(&mut self) {
        if self.resample_each_step {
            self.noise = DenseTensor::random_normal(self.clean_target.shape().clone(), 1.0, &mut self.rng);
        }
    }
}

/// `1 − Σ_mask (y − ŷ)² / Σ_mask (y − ȳ)²`, with `ȳ` the masked mean of `truth`.
pub fn r2_score(pred: &DenseTensor, truth: &DenseTensor, mask: &DenseTensor) -> Result<f64> {
    if pred.shape() != truth.shape() || truth.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}, truth {}, mask {}",
            pred.shape(),
            truth.shape(),
            mask.shape()
        )));
    }
    let count = check_binary(mask)?;
    if count < 2 {
        return Err(Error::DegenerateVariance(format!("mask selects {count} entries")));
    }
    let selected = || {
        truth
            .data()
            .iter()
            .zip(pred.data())
            .zip(mask.data())
            .filter(|(_, &m)| m == 1.0)
            .map(|((&y, &p), _)| (y, p))
    };
    let mean = selected().map(|(y, _)| y).sum::<f64>() / count as f64;
    let (sse, sst) = selected().fold((0.0, 0.0), |(sse, sst), (y, p)| {
        (sse + (y - p) * (y - p), sst + (y - mean) * (y - mean))
    });
    if sst == 0.0 {
        return Err(Error::DegenerateVariance("selected truth entries are constant".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Least squares through a chain of weight matrices:
/// `(1/n) ||W_D ··· W_1 X − Y||²_F` for inputs `X: (d_0, n)` and targets `Y: (d_D, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRegressionObjective {
    inputs: DenseTensor,
    targets: DenseTensor,
}

fn plan(s: &str) -> ContractionPlan {
    s.parse().expect("static plan")
}

impl ChainRegressionObjective {
    pub fn new(inputs: DenseTensor, targets: DenseTensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.dims()[1] != targets.dims()[1] {
            return Err(Error::ShapeMismatch(format!(
                "inputs {} and targets {} must be matrices with equal column counts",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(ChainRegressionObjective { inputs, targets })
    }

    pub fn inputs(&self) -> &DenseTensor {
        &self.inputs
    }

    pub fn targets(&self) -> &DenseTensor {
        &self.targets
    }

    /// Loss and gradient with respect to each weight matrix.
    pub fn loss_and_grads(&self, weights: &[DenseTensor]) -> Result<(f64, Vec<DenseTensor>)> {
        let matmul = plan("ij,jk->ik");
        let mut activations = vec![self.inputs.clone()];
        for w in weights {
            let next = contract(&matmul, &[w, activations.last().unwrap()])?;
            activations.push(next);
        }
        let out = activations.last().unwrap();
        if out.shape() != self.targets.shape() {
            return Err(Error::ShapeMismatch(format!(
                "chain output {} vs targets {}",
                out.shape(),
                self.targets.shape()
            )));
        }
        let n = self.targets.dims()[1] as f64;
        let residual = axpy_scale(out, 1.0, &self.targets, -1.0)?;
        let loss = crate::tensor::frobenius_norm_sq(&residual) / n;
        let mut delta = residual.scale(2.0 / n)?;

        let outer = plan("ij,kj->ik");
        let back = plan("ji,jk->ik");
        let mut grads = vec![None; weights.len()];
        for l in (0..weights.len()).rev() {
            grads[l] = Some(contract(&outer, &[&delta, &activations[l]])?);
            if l > 0 {
                delta = contract(&back, &[&weights[l], &delta])?;
            }
        }
        Ok((loss, grads.into_iter().map(Option::unwrap).collect()))
    }
}
