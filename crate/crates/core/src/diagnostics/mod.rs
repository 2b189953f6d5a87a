//! Norm-dynamics measurements and trajectory recording.

mod checks;

use std::io::Write;

use crate::error::{Error, Result};
use crate::optim::StepTrace;

pub use checks::{
    check_das_matches_sam, check_layerwise_q, check_pairwise_sam_dynamics, check_sam_q_dynamics,
    check_sgd_balanced_drift, check_sgd_conservation, observe_shrinkage, CheckParams,
    ShrinkageObservation, TheoremCheckReport, TheoremId, Verdict,
};

/// Shortest text that parses back to the same `f64`, in exponent form for
/// very small or large magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Norm deviation `Q = Σ_k (s_k − s̄)²` of squared core norms `s_k`.
pub fn norm_deviation(core_norms_sq: &[f64]) -> f64 {
    if core_norms_sq.is_empty() {
        return 0.0;
    }
    let m = mean(core_norms_sq);
    core_norms_sq.iter().map(|s| (s - m) * (s - m)).sum()
}

/// The same quantity through all pairs: `(1/2K) Σ_{i,j} (s_i − s_j)²`.
pub fn norm_deviation_pairwise(core_norms_sq: &[f64]) -> f64 {
    let k = core_norms_sq.len();
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for &si in core_norms_sq {
        for &sj in core_norms_sq {
            total += (si - sj) * (si - sj);
        }
    }
    total / (2.0 * k as f64)
}

/// Population covariance `(1/K) Σ_k (x_k − x̄)(y_k − ȳ)`.
pub fn norm_grad_covariance(core_norms_sq: &[f64], grad_norms_sq: &[f64]) -> Result<f64> {
    if core_norms_sq.len() != grad_norms_sq.len() {
        return Err(Error::LengthMismatch {
            left: core_norms_sq.len(),
            right: grad_norms_sq.len(),
        });
    }
    if core_norms_sq.is_empty() {
        return Err(Error::InvalidArgument("covariance of zero cores".into()));
    }
    let (mx, my) = (mean(core_norms_sq), mean(grad_norms_sq));
    let sum: f64 = core_norms_sq
        .iter()
        .zip(grad_norms_sq)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    Ok(sum / core_norms_sq.len() as f64)
}

/// Change in `Q` when every `s_k` moves by `delta[k]`, computed without
/// subtracting two large `Q` values.
pub fn norm_deviation_change(core_norms_sq: &[f64], delta: &[f64]) -> f64 {
    let ms = mean(core_norms_sq);
    let md = mean(delta);
    core_norms_sq
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let dd = d - md;
            2.0 * (s - ms) * dd + dd * dd
        })
        .sum()
}

/// Per-iteration diagnostics, measured at the cores before the step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub loss: f64,
    pub q: f64,
    pub cov: f64,
    pub core_norms_sq: Vec<f64>,
    pub grad_norms_sq: Vec<f64>,
    pub lambdas: Option<Vec<f64>>,
}

/// Snapshot of the norm state; the trajectory rows double as snapshots.
pub type NormSnapshot = TrajectoryRecord;

impl TrajectoryRecord {
    pub fn from_trace(t: usize, trace: &StepTrace) -> Self {
        TrajectoryRecord {
            t,
            loss: trace.loss,
            q: norm_deviation(&trace.core_norms_sq),
            cov: norm_grad_covariance(&trace.core_norms_sq, &trace.grad_norms_sq).unwrap_or(0.0),
            core_norms_sq: trace.core_norms_sq.clone(),
            grad_norms_sq: trace.grad_norms_sq.clone(),
            lambdas: trace.lambdas.clone(),
        }
    }

    pub fn csv_header(k: usize, with_lambdas: bool) -> String {
        let mut cols = vec!["t".to_string(), "loss".into(), "q".into(), "cov".into()];
        cols.extend((1..=k).map(|i| format!("core_norm_sq_{i}")));
        cols.extend((1..=k).map(|i| format!("grad_norm_sq_{i}")));
        if with_lambdas {
            cols.extend((1..=k).map(|i| format!("lambda_{i}")));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.t.to_string(),
            num(self.loss),
            num(self.q),
            num(self.cov),
        ];
        cols.extend(self.core_norms_sq.iter().map(|&x| num(x)));
        cols.extend(self.grad_norms_sq.iter().map(|&x| num(x)));
        if let Some(l) = &self.lambdas {
            cols.extend(l.iter().map(|&x| num(x)));
        }
        cols.join(",")
    }
}

/// Receives one record per optimizer step.
pub trait DiagnosticsSink {
    fn record(&mut self, record: &TrajectoryRecord) -> Result<()>;
}

impl DiagnosticsSink for Vec<TrajectoryRecord> {
    fn record(&mut self, record: &TrajectoryRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl DiagnosticsSink for NullSink {
    fn record(&mut self, _: &TrajectoryRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams records as CSV; the header is written with the first record.
pub struct CsvSink<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> Self {
        CsvSink {
            out,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> DiagnosticsSink for CsvSink<W> {
    fn record(&mut self, record: &TrajectoryRecord) -> Result<()> {
        if !self.header_written {
            let header = TrajectoryRecord::csv_header(record.core_norms_sq.len(), record.lambdas.is_some());
            writeln!(self.out, "{header}")?;
            self.header_written = true;
        }
        writeln!(self.out, "{}", record.csv_row())?;
        Ok(())
    }
}

/// Forwards each record to two sinks.
pub struct Tee<'a>(pub &'a mut dyn DiagnosticsSink, pub &'a mut dyn DiagnosticsSink);

impl DiagnosticsSink for Tee<'_> {
    fn record(&mut self, record: &TrajectoryRecord) -> Result<()> {
        self.0.record(record)?;
        self.1.record(record)
    }
}
