//! Experiment configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{ModelFamily, ReconstructionSpec};
use crate::optim::{AdamConfig, BaseOptimizer, DasConfig, OptimizerConfig, SamConfig, Schedule, SgdConfig};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Tucker2Noise,
    Completion,
    TheoremSuite,
    Custom,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Tucker2Noise => "tucker2-noise",
            ExperimentKind::Completion => "completion",
            ExperimentKind::TheoremSuite => "theorem-suite",
            ExperimentKind::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default)]
    pub mode_sizes: Vec<usize>,
    #[serde(default)]
    pub ranks: Vec<usize>,
    /// Contraction plan of a `custom` model, e.g. `"ir,jr->ij"`.
    pub plan: Option<String>,
    pub core_shapes: Option<Vec<Vec<usize>>>,
    /// Standard deviation of the initial core entries.
    #[serde(default = "one")]
    pub init_scale: f64,
    /// Per-core multipliers applied after the random draw.
    pub init_multipliers: Option<Vec<f64>>,
}

fn default_family() -> String {
    "tucker2".into()
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveBlock {
    /// Target tensor file (DTF1 or CSV); synthetic when absent.
    pub target: Option<PathBuf>,
    /// Binary mask file; drawn from `mask_density` when absent.
    pub mask: Option<PathBuf>,
    /// Fraction of entries observed during training.
    #[serde(default = "one")]
    pub mask_density: f64,
    #[serde(default)]
    pub noise_alpha: f64,
    /// Runs one trajectory per value instead of `noise_alpha`.
    pub noise_alphas: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub resample: bool,
    /// Ranks of the synthetic generator; defaults to the model ranks.
    pub target_ranks: Option<Vec<usize>>,
}

fn yes() -> bool {
    true
}

impl Default for ObjectiveBlock {
    fn default() -> Self {
        ObjectiveBlock {
            target: None,
            mask: None,
            mask_density: 1.0,
            noise_alpha: 0.0,
            noise_alphas: None,
            resample: true,
            target_ranks: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Runs one trajectory per optimizer instead of `kind`.
    pub kinds: Option<Vec<String>>,
    /// Base optimizer of `sam` and `das`.
    #[serde(default = "default_kind")]
    pub base: String,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_schedule")]
    pub schedule: String,
}

fn default_kind() -> String {
    "adam".into()
}
fn default_eta() -> f64 {
    1e-3
}
fn default_rho() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_iterations() -> usize {
    1000
}
fn default_schedule() -> String {
    "constant".into()
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        toml::from_str("").expect("all optimizer fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteBlock {
    #[serde(default = "default_seeds")]
    pub seeds: u64,
}

fn default_seeds() -> u64 {
    10
}

impl Default for SuiteBlock {
    fn default() -> Self {
        SuiteBlock { seeds: default_seeds() }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: Option<ModelBlock>,
    #[serde(default)]
    pub objective: ObjectiveBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub suite: SuiteBlock,
}

/// Reads, parses and validates a config file. Relative data paths are
/// resolved against the file's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let mut cfg = parse_config_str(&text).map_err(|e| e.context(path.display().to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.objective.target, &mut cfg.objective.mask].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.validate_files()?;
    Ok(cfg)
}

/// Parses and validates config text, leaving file paths unchecked.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let needs_model = self.kind != ExperimentKind::TheoremSuite;
        if needs_model && self.model.is_none() {
            return Err(invalid(format!("[model] block is required for kind '{}'", self.kind.name())));
        }
        let o = &self.objective;
        if !(o.mask_density > 0.0 && o.mask_density <= 1.0) {
            return Err(invalid(format!("objective.mask_density must be in (0, 1], got {}", o.mask_density)));
        }
        for a in self.noise_alphas() {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(invalid(format!("noise alpha must be finite and >= 0, got {a}")));
            }
        }
        if self.optimizer.iterations == 0 {
            return Err(invalid("optimizer.iterations must be >= 1"));
        }
        if self.suite.seeds == 0 {
            return Err(invalid("suite.seeds must be >= 1"));
        }
        if needs_model {
            self.spec()?;
            self.optimizer_configs()?;
            self.schedule()?;
        }
        if self.kind == ExperimentKind::Tucker2Noise && self.model_family()? != ModelFamily::Tucker2 {
            return Err(invalid("tucker2-noise requires model.family = \"tucker2\""));
        }
        if self.kind == ExperimentKind::Custom && self.objective.target.is_none() {
            return Err(invalid("custom experiments need objective.target"));
        }
        Ok(())
    }

    fn validate_files(&self) -> Result<()> {
        for p in [&self.objective.target, &self.objective.mask].into_iter().flatten() {
            if !p.is_file() {
                return Err(invalid(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    fn model_block(&self) -> Result<&ModelBlock> {
        self.model.as_ref().ok_or_else(|| invalid("[model] block is missing"))
    }

    pub fn model_family(&self) -> Result<ModelFamily> {
        self.model_block()?.family.parse().map_err(|e: Error| invalid(e.to_string()))
    }

    pub fn spec(&self) -> Result<ReconstructionSpec> {
        let m = self.model_block()?;
        let family = self.model_family()?;
        let spec = if family == ModelFamily::Custom {
            let plan = m.plan.as_deref().ok_or_else(|| invalid("custom models need model.plan"))?;
            let shapes = m
                .core_shapes
                .as_ref()
                .ok_or_else(|| invalid("custom models need model.core_shapes"))?
                .iter()
                .map(|d| Shape::new(d.clone()))
                .collect::<Result<Vec<_>>>()?;
            ReconstructionSpec::custom(plan, shapes)
        } else {
            ReconstructionSpec::from_family(family, &m.mode_sizes, &m.ranks)
        };
        let spec = spec.map_err(|e| invalid(format!("model: {e}")))?;
        if let Some(mult) = &m.init_multipliers {
            if mult.len() != spec.num_cores() {
                return Err(invalid(format!(
                    "model.init_multipliers has {} entries for {} cores",
                    mult.len(),
                    spec.num_cores()
                )));
            }
        }
        if !(m.init_scale > 0.0) {
            return Err(invalid("model.init_scale must be > 0"));
        }
        Ok(spec)
    }

    /// Spec of the synthetic generator (model family with `target_ranks`).
    pub fn generator_spec(&self) -> Result<ReconstructionSpec> {
        match &self.objective.target_ranks {
            None => self.spec(),
            Some(ranks) => {
                let m = self.model_block()?;
                ReconstructionSpec::from_family(self.model_family()?, &m.mode_sizes, ranks)
                    .map_err(|e| invalid(format!("objective.target_ranks: {e}")))
            }
        }
    }

    pub fn noise_alphas(&self) -> Vec<f64> {
        match &self.objective.noise_alphas {
            Some(a) => a.clone(),
            None => vec![self.objective.noise_alpha],
        }
    }

    pub fn optimizer_kinds(&self) -> Vec<String> {
        match &self.optimizer.kinds {
            Some(k) => k.clone(),
            None => vec![self.optimizer.kind.clone()],
        }
    }

    fn base_optimizer(&self, name: &str) -> Result<BaseOptimizer> {
        let o = &self.optimizer;
        match name {
            "sgd" => Ok(BaseOptimizer::Sgd(SgdConfig {
                eta: o.eta,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
            })),
            "adam" => Ok(BaseOptimizer::Adam(AdamConfig {
                eta: o.eta,
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
                weight_decay: o.weight_decay,
            })),
            other => Err(invalid(format!("unknown base optimizer '{other}'"))),
        }
    }

    /// One optimizer per entry of [`optimizer_kinds`](Self::optimizer_kinds).
    pub fn optimizer_configs(&self) -> Result<Vec<OptimizerConfig>> {
        self.optimizer_kinds()
            .iter()
            .map(|kind| {
                let cfg = match kind.as_str() {
                    "sgd" | "adam" => match self.base_optimizer(kind)? {
                        BaseOptimizer::Sgd(c) => OptimizerConfig::Sgd(c),
                        BaseOptimizer::Adam(c) => OptimizerConfig::Adam(c),
                    },
                    "sam" => OptimizerConfig::Sam(SamConfig {
                        rho: self.optimizer.rho,
                        base: self.base_optimizer(&self.optimizer.base)?,
                    }),
                    "das" => OptimizerConfig::Das(DasConfig {
                        alpha: self.optimizer.alpha,
                        base: self.base_optimizer(&self.optimizer.base)?,
                    }),
                    other => return Err(invalid(format!("unknown optimizer '{other}'"))),
                };
                cfg.validate().map_err(|e| invalid(format!("optimizer: {e}")))?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.optimizer.schedule.as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine {
                total: self.optimizer.iterations,
            }),
            other => Err(invalid(format!("unknown schedule '{other}'"))),
        }
    }
}
