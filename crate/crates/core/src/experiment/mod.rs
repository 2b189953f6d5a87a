//! Config-driven experiment runner: synthetic data, training runs, the
//! theorem-check suite, and the files each run leaves behind.
//!
//! Every run directory receives `summary.txt` (for people) and `report.txt`
//! (one `key = value` pair per line). Training runs also write
//! `trajectory.csv`; sweeps over noise levels or optimizers write one
//! sub-directory per variant.

mod config;
pub mod suite;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{
    norm_deviation, num, CsvSink, ShrinkageObservation, Tee, TheoremCheckReport, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::model::{reconstruct, CoreSet, ReconstructionSpec};
use crate::objective::{r2_score, MaskedMseObjective, NoisyTargetObjective, Objective};
use crate::optim::{self, Optimizer, OptimizerConfig, Schedule};
use crate::tensor::{axpy_scale, frobenius_norm_sq, DenseTensor, Shape};

pub use crate::tensor::io::ingest_tensor;
pub use config::{
    parse_config, parse_config_str, ExperimentConfig, ExperimentKind, ModelBlock, ObjectiveBlock, OptimizerBlock,
    SuiteBlock,
};
pub use suite::{run_theorem_suite, SuiteOutcome};

const STREAM_GROUND_TRUTH: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_RESAMPLE: u64 = 5;

/// Independent generator for one purpose under one seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Synthetic target and the cores that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// `T* + αN`.
    pub target: DenseTensor,
    /// `T*`.
    pub clean: DenseTensor,
    pub cores: CoreSet,
}

/// Draws ground-truth cores with standard normal entries, rescales them
/// evenly so that `T*` has unit RMS, and adds `alpha` times standard normal
/// noise. `alpha` is therefore the noise-to-signal ratio.
pub fn generate_synthetic(spec: &ReconstructionSpec, seed: u64, alpha: f64) -> Result<SyntheticData> {
    let raw = CoreSet::random(spec, 1.0, &mut rng_stream(seed, STREAM_GROUND_TRUTH));
    let t = reconstruct(spec, &raw)?;
    let rms = (frobenius_norm_sq(&t) / t.numel() as f64).sqrt();
    let cores = if rms > 0.0 {
        let c = rms.recip().powf(1.0 / raw.len() as f64);
        raw.scaled(&vec![c; raw.len()])?
    } else {
        raw
    };
    let clean = reconstruct(spec, &cores)?;
    let target = if alpha == 0.0 {
        clean.clone()
    } else {
        let noise = DenseTensor::random_normal(clean.shape().clone(), 1.0, &mut rng_stream(seed, STREAM_NOISE));
        axpy_scale(&clean, 1.0, &noise, alpha)?
    };
    Ok(SyntheticData { target, clean, cores })
}

/// Binary mask with exactly `round(density · n)` observed entries (at least one).
pub fn random_mask(shape: &Shape, density: f64, seed: u64) -> Result<DenseTensor> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask density must be in (0, 1], got {density}")));
    }
    let n = shape.numel();
    let observed = ((density * n as f64).round() as usize).clamp(1, n);
    let mut data = vec![0.0; n];
    for i in index::sample(&mut rng_stream(seed, STREAM_MASK), n, observed) {
        data[i] = 1.0;
    }
    DenseTensor::from_vec(shape.clone(), data)
}

/// Initial cores: N(0, init_scale²) entries times the per-core multipliers.
pub fn initial_cores(spec: &ReconstructionSpec, model: &ModelBlock, seed: u64) -> Result<CoreSet> {
    let cores = CoreSet::random(spec, model.init_scale, &mut rng_stream(seed, STREAM_INIT));
    match &model.init_multipliers {
        Some(m) => cores.scaled(m),
        None => Ok(cores),
    }
}

/// One training trajectory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub label: String,
    pub optimizer: String,
    pub records: Vec<TrajectoryRecord>,
    pub final_loss: f64,
    pub final_q: f64,
    /// R² on the held-out entries, when there are any.
    pub r2: Option<f64>,
    pub seconds_per_step: f64,
    pub cores: CoreSet,
}

impl RunOutcome {
    pub fn initial_q(&self) -> f64 {
        self.records.first().map_or(self.final_q, |r| r.q)
    }

    pub fn mean_cov(&self) -> f64 {
        mean(self.records.iter().map(|r| r.cov))
    }

    pub fn mean_abs_cov(&self) -> f64 {
        mean(self.records.iter().map(|r| r.cov.abs()))
    }

    /// Mean per-step decrease of `Q` relative to its starting value.
    pub fn q_decrease_rate(&self) -> f64 {
        let q0 = self.initial_q();
        if q0 == 0.0 || self.records.is_empty() {
            return 0.0;
        }
        (q0 - self.final_q) / (q0 * self.records.len() as f64)
    }

    fn key_values(&self, prefix: &str) -> Vec<String> {
        let mut lines = vec![
            format!("{prefix}label = {}", self.label),
            format!("{prefix}optimizer = {}", self.optimizer),
            format!("{prefix}iterations = {}", self.records.len()),
            format!("{prefix}final_loss = {}", num(self.final_loss)),
            format!("{prefix}initial_q = {}", num(self.initial_q())),
            format!("{prefix}final_q = {}", num(self.final_q)),
            format!("{prefix}q_decrease_rate = {}", num(self.q_decrease_rate())),
            format!("{prefix}mean_cov = {}", num(self.mean_cov())),
            format!("{prefix}mean_abs_cov = {}", num(self.mean_abs_cov())),
        ];
        if let Some(r2) = self.r2 {
            lines.push(format!("{prefix}r2 = {}", num(r2)));
        }
        lines
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains `cores` and optionally streams the trajectory to `csv`.
#[allow(clippy::too_many_arguments)]
pub fn train<O: Objective + ?Sized>(
    label: &str,
    spec: &ReconstructionSpec,
    cores: CoreSet,
    objective: &mut O,
    config: OptimizerConfig,
    schedule: Schedule,
    iterations: usize,
    csv: Option<&Path>,
) -> Result<RunOutcome> {
    let mut optimizer = Optimizer::new(config)?.with_schedule(schedule);
    let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(iterations);
    let start = Instant::now();
    let cores = match csv {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
            let mut csv_sink = CsvSink::new(BufWriter::new(file));
            let cores = {
                let mut tee = Tee(&mut records, &mut csv_sink);
                optim::run(spec, cores, objective, &mut optimizer, iterations, &mut tee)?
            };
            csv_sink.into_inner().flush()?;
            cores
        }
        None => optim::run(spec, cores, objective, &mut optimizer, iterations, &mut records)?,
    };
    let seconds_per_step = start.elapsed().as_secs_f64() / iterations as f64;
    let (final_loss, _) = optim::loss_and_grads(spec, cores.cores(), objective)?;
    Ok(RunOutcome {
        label: label.to_string(),
        optimizer: config.name().to_string(),
        records,
        final_loss,
        final_q: norm_deviation(&cores.norms_sq()),
        r2: None,
        seconds_per_step,
        cores,
    })
}

/// Everything one `run` produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub runs: Vec<RunOutcome>,
    pub checks: Vec<(String, TheoremCheckReport)>,
    pub observations: Vec<(String, ShrinkageObservation)>,
}

impl ExperimentOutcome {
    pub fn failed_checks(&self) -> usize {
        self.checks.iter().filter(|(_, r)| !r.passed()).count()
    }

    pub fn passed(&self) -> bool {
        self.failed_checks() == 0
    }

    /// `report.txt` contents.
    pub fn report(&self) -> String {
        let mut lines = vec![
            format!("experiment = {}", self.kind.name()),
            format!("seed = {}", self.seed),
            format!("runs = {}", self.runs.len()),
        ];
        for (i, run) in self.runs.iter().enumerate() {
            lines.extend(run.key_values(&format!("run.{i}.")));
        }
        if self.kind == ExperimentKind::Tucker2Noise && self.runs.len() > 1 {
            lines.push(format!("q_decrease_ordered_by_alpha = {}", strictly_increasing(self.runs.iter().map(RunOutcome::q_decrease_rate))));
            lines.push(format!("abs_cov_ordered_by_alpha = {}", strictly_increasing(self.runs.iter().map(RunOutcome::mean_abs_cov))));
        }
        let r2s: Vec<f64> = self.runs.iter().filter_map(|r| r.r2).collect();
        if r2s.len() > 1 {
            let spread = r2s.iter().cloned().fold(f64::MIN, f64::max) - r2s.iter().cloned().fold(f64::MAX, f64::min);
            lines.push(format!("r2_spread = {}", num(spread)));
        }
        for (i, (label, report)) in self.checks.iter().enumerate() {
            lines.push(format!("check.{i}.label = {label}"));
            lines.push(report.to_key_values(&format!("check.{i}.")));
        }
        for (i, (label, obs)) in self.observations.iter().enumerate() {
            lines.push(format!("observation.{i}.label = {label}"));
            lines.push(obs.to_key_values(&format!("observation.{i}.")));
        }
        lines.push(format!("checks_total = {}", self.checks.len()));
        lines.push(format!("checks_failed = {}", self.failed_checks()));
        lines.push(format!("status = {}", if self.passed() { "PASS" } else { "FAIL" }));
        lines.join("\n") + "\n"
    }

    /// `summary.txt` contents.
    pub fn summary(&self) -> String {
        let mut out = format!("{} experiment, seed {}\n", self.kind.name(), self.seed);
        if !self.runs.is_empty() {
            out.push_str(&format!(
                "\n{:<16} {:<6} {:>14} {:>14} {:>14} {:>14} {:>10} {:>12}\n",
                "run", "optim", "final loss", "initial Q", "final Q", "mean Cov", "R2", "ms/step"
            ));
            for r in &self.runs {
                out.push_str(&format!(
                    "{:<16} {:<6} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>10} {:>12.4}\n",
                    r.label,
                    r.optimizer,
                    r.final_loss,
                    r.initial_q(),
                    r.final_q,
                    r.mean_cov(),
                    r.r2.map_or("-".to_string(), |v| format!("{v:.5}")),
                    r.seconds_per_step * 1e3
                ));
            }
        }
        if !self.checks.is_empty() {
            out.push_str(&format!(
                "\nchecks: {} of {} passed\n",
                self.checks.len() - self.failed_checks(),
                self.checks.len()
            ));
            for (label, r) in self.checks.iter().filter(|(_, r)| !r.passed()) {
                out.push_str(&format!(
                    "  FAIL {label}: measured {} predicted {} rel {}\n",
                    r.measured, r.predicted, r.rel_residual
                ));
            }
        }
        if !self.observations.is_empty() {
            let shrinking = self.observations.iter().filter(|(_, o)| o.initial_sign() < 0.0).count();
            out.push_str(&format!(
                "\npairwise gap shrinking at t=0 in {shrinking} of {} observations\n",
                self.observations.len()
            ));
        }
        out.push_str(&format!("\nstatus: {}\n", if self.passed() { "PASS" } else { "FAIL" }));
        out
    }
}

fn strictly_increasing(xs: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = xs.collect();
    v.windows(2).all(|w| w[0] < w[1])
}

fn variant_dir(out: Option<&Path>, label: &str, many: bool) -> Result<Option<PathBuf>> {
    let Some(out) = out else { return Ok(None) };
    let dir = if many { out.join(label) } else { out.to_path_buf() };
    fs::create_dir_all(&dir).map_err(|e| Error::from(e).context(dir.display().to_string()))?;
    Ok(Some(dir))
}

fn alpha_label(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

/// Tucker-2 fit to `T* + αN`, one run per noise level from the same
/// initial cores and the same clean target.
pub fn run_tucker2_noise(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let spec = cfg.spec()?;
    let clean = match &cfg.objective.target {
        Some(path) => ingest_tensor(path)?,
        None => generate_synthetic(&cfg.generator_spec()?, cfg.seed, 0.0)?.clean,
    };
    let model = cfg.model.as_ref().expect("validated");
    let init = initial_cores(&spec, model, cfg.seed)?;
    let config = cfg.optimizer_configs()?[0];
    let alphas = cfg.noise_alphas();
    let mut runs = Vec::new();
    for (i, &alpha) in alphas.iter().enumerate() {
        let label = alpha_label(alpha);
        let dir = variant_dir(out, &label, alphas.len() > 1)?;
        let mut objective = NoisyTargetObjective::new(
            clean.clone(),
            alpha,
            cfg.objective.resample,
            rng_seed(cfg.seed, STREAM_RESAMPLE, i as u64),
        );
        let run = train(
            &label,
            &spec,
            init.clone(),
            &mut objective,
            config,
            cfg.schedule()?,
            cfg.optimizer.iterations,
            dir.as_deref().map(|d| d.join("trajectory.csv")).as_deref(),
        )
        .map_err(|e| e.context(label.clone()))?;
        runs.push(run);
    }
    Ok(ExperimentOutcome {
        kind: cfg.kind,
        seed: cfg.seed,
        runs,
        checks: Vec::new(),
        observations: Vec::new(),
    })
}

fn rng_seed(seed: u64, stream: u64, index: u64) -> u64 {
    use rand::RngCore;
    let mut rng = rng_stream(seed, stream);
    rng.set_word_pos(u128::from(index) * 16);
    rng.next_u64()
}

/// Masked reconstruction: train on the observed entries, score R² on the rest.
/// Used for `completion` and `custom` experiments.
pub fn run_completion(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let spec = cfg.spec()?;
    let target = match &cfg.objective.target {
        Some(path) => ingest_tensor(path)?,
        None => generate_synthetic(&cfg.generator_spec()?, cfg.seed, cfg.objective.noise_alpha)?.target,
    };
    if target.shape() != spec.output_shape() {
        return Err(Error::ShapeMismatch(format!(
            "target {} but the model reconstructs {}",
            target.shape(),
            spec.output_shape()
        )));
    }
    let mask = match &cfg.objective.mask {
        Some(path) => ingest_tensor(path)?,
        None => random_mask(target.shape(), cfg.objective.mask_density, cfg.seed)?,
    };
    let held_out_data: Vec<f64> = mask.data().iter().map(|m| 1.0 - m).collect();
    let held_out = DenseTensor::from_vec(mask.shape().clone(), held_out_data)?;
    let scored = held_out.data().iter().filter(|&&m| m == 1.0).count() >= 2;

    let model = cfg.model.as_ref().expect("validated");
    let init = initial_cores(&spec, model, cfg.seed)?;
    let configs = cfg.optimizer_configs()?;
    let mut runs = Vec::new();
    for config in &configs {
        let label = config.name().to_string();
        let dir = variant_dir(out, &label, configs.len() > 1)?;
        let mut objective = MaskedMseObjective::new(target.clone(), mask.clone())?;
        let mut run = train(
            &label,
            &spec,
            init.clone(),
            &mut objective,
            *config,
            cfg.schedule()?,
            cfg.optimizer.iterations,
            dir.as_deref().map(|d| d.join("trajectory.csv")).as_deref(),
        )
        .map_err(|e| e.context(label.clone()))?;
        if scored {
            let pred = reconstruct(&spec, &run.cores)?;
            run.r2 = Some(r2_score(&pred, &target, &held_out)?);
        }
        runs.push(run);
    }
    Ok(ExperimentOutcome {
        kind: cfg.kind,
        seed: cfg.seed,
        runs,
        checks: Vec::new(),
        observations: Vec::new(),
    })
}

/// Runs the configured experiment. With `out` set, writes the trajectory
/// CSVs, `summary.txt` and `report.txt` there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).context(dir.display().to_string()))?;
    }
    let outcome = match cfg.kind {
        ExperimentKind::Tucker2Noise => run_tucker2_noise(cfg, out),
        ExperimentKind::Completion | ExperimentKind::Custom => run_completion(cfg, out),
        ExperimentKind::TheoremSuite => run_theorem_suite(cfg.seed, cfg.suite.seeds).map(SuiteOutcome::into_outcome),
    }
    .map_err(|e| e.context(format!("{} experiment", cfg.kind.name())))?;
    if let Some(dir) = out {
        write_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    for (name, text) in [("summary.txt", outcome.summary()), ("report.txt", outcome.report())] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    }
    Ok(())
}

/// Files written by [`generate_to_dir`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedFiles {
    pub target: PathBuf,
    pub clean: PathBuf,
    pub mask: PathBuf,
    pub cores: Vec<PathBuf>,
}

/// Writes the synthetic target, clean target, mask and ground-truth cores
/// described by `cfg` as DTF1 files.
pub fn generate_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<GeneratedFiles> {
    use crate::tensor::io::write_dtf1;
    fs::create_dir_all(dir).map_err(|e| Error::from(e).context(dir.display().to_string()))?;
    let spec = cfg.generator_spec()?;
    let data = generate_synthetic(&spec, cfg.seed, cfg.objective.noise_alpha)?;
    let mask = random_mask(data.target.shape(), cfg.objective.mask_density, cfg.seed)?;
    let files = GeneratedFiles {
        target: dir.join("target.dtf1"),
        clean: dir.join("clean.dtf1"),
        mask: dir.join("mask.dtf1"),
        cores: (0..data.cores.len()).map(|k| dir.join(format!("core_{k}.dtf1"))).collect(),
    };
    write_dtf1(&files.target, &data.target)?;
    write_dtf1(&files.clean, &data.clean)?;
    write_dtf1(&files.mask, &mask)?;
    for (path, core) in files.cores.iter().zip(data.cores.cores()) {
        write_dtf1(path, core)?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_without_noise_is_exact_low_rank() {
        let spec = ReconstructionSpec::tucker2(5, 2, 2, 4).unwrap();
        let d = generate_synthetic(&spec, 3, 0.0).unwrap();
        assert_eq!(d.target, d.clean);
        assert_eq!(reconstruct(&spec, &d.cores).unwrap(), d.clean);
        let again = generate_synthetic(&spec, 3, 0.0).unwrap();
        assert_eq!(crate::tensor::io::to_dtf1_bytes(&d.target), crate::tensor::io::to_dtf1_bytes(&again.target));
        let noisy = generate_synthetic(&spec, 3, 0.5).unwrap();
        assert_eq!(noisy.clean, d.clean);
        assert_ne!(noisy.target, d.target);
    }

    #[test]
    fn mask_has_exact_density() {
        let shape = Shape::new([10, 10]).unwrap();
        let m = random_mask(&shape, 0.3, 1).unwrap();
        assert_eq!(m.data().iter().sum::<f64>(), 30.0);
        assert_eq!(random_mask(&shape, 1.0, 1).unwrap().data().iter().sum::<f64>(), 100.0);
        assert!(random_mask(&shape, 0.0, 1).is_err());
    }

    #[test]
    fn streams_are_independent() {
        use rand::RngCore;
        assert_ne!(rng_stream(0, 1).next_u64(), rng_stream(0, 2).next_u64());
        assert_ne!(rng_seed(0, 5, 0), rng_seed(0, 5, 1));
    }
}
