//! Frame-based evaluation: micro-averaged F1, segment error rate with
//! one-frame segments, and aggregation over repeated runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/target shape mismatch: {pred:?} vs {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
    #[error("error rate is undefined: no active reference frames")]
    NoReference,
    #[error("cannot aggregate an empty report list")]
    EmptyReports,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Raw frame-level tallies pooled over everything scored so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub n_ref: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
}

impl FrameCounts {
    /// Score one sequence: binarize predictions at `threshold` (active when
    /// `p >= threshold`) and tally per-frame counts over the first
    /// `valid_rows` rows.
    pub fn add(
        &mut self,
        pred: &Tensor,
        target: &Tensor,
        threshold: f64,
        valid_rows: usize,
    ) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.shape().to_vec(),
                target: target.shape().to_vec(),
            });
        }
        let c = pred.shape()[1];
        for t in 0..valid_rows {
            let mut frame_fn = 0u64;
            let mut frame_fp = 0u64;
            for j in 0..c {
                let y = target.at2(t, j) == 1.0;
                let p = pred.at2(t, j) >= threshold;
                match (y, p) {
                    (true, true) => {
                        self.tp += 1;
                        self.n_ref += 1;
                    }
                    (true, false) => {
                        self.fn_ += 1;
                        self.n_ref += 1;
                        frame_fn += 1;
                    }
                    (false, true) => {
                        self.fp += 1;
                        frame_fp += 1;
                    }
                    (false, false) => {}
                }
            }
            self.substitutions += frame_fn.min(frame_fp);
            self.deletions += frame_fn.saturating_sub(frame_fp);
            self.insertions += frame_fp.saturating_sub(frame_fn);
        }
        Ok(())
    }

    /// Micro-averaged F1; 0/0 counts as 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Segment error rate over one-frame segments. Errors when no reference
    /// frames are active.
    pub fn er(&self) -> Result<f64> {
        if self.n_ref == 0 {
            return Err(MetricsError::NoReference);
        }
        Ok((self.substitutions + self.deletions + self.insertions) as f64 / self.n_ref as f64)
    }

    pub fn finish(self, threshold: f64) -> Result<EvalReport> {
        Ok(EvalReport {
            f1: self.f1(),
            er: self.er()?,
            counts: self,
            threshold,
        })
    }
}

/// Scores for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub er: f64,
    pub counts: FrameCounts,
    pub threshold: f64,
}

/// Score a single `[T, C]` prediction matrix against binary targets.
pub fn frame_scores(
    pred: &Tensor,
    target: &Tensor,
    threshold: f64,
    valid_rows: usize,
) -> Result<EvalReport> {
    let mut counts = FrameCounts::default();
    counts.add(pred, target, threshold, valid_rows)?;
    counts.finish(threshold)
}

/// Mean and population standard deviation of F1 and ER over repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub er_mean: f64,
    pub er_std: f64,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyReports);
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let std = |f: &dyn Fn(&EvalReport) -> f64, mu: f64| {
        (reports.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let f1_mean = mean(&|r| r.f1);
    let er_mean = mean(&|r| r.er);
    Ok(Aggregate {
        runs: reports.len(),
        f1_mean,
        f1_std: std(&|r| r.f1, f1_mean),
        er_mean,
        er_std: std(&|r| r.er, er_mean),
    })
}

/// One row of the results table: a method label with aggregated scores and
/// optional deltas against a baseline row.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub label: String,
    pub aggregate: Aggregate,
    pub delta_f1_vs_base: Option<f64>,
    pub delta_er_vs_base: Option<f64>,
}

/// CSV with one row per method: label, F1 mean/std and delta vs baseline,
/// ER mean/std and delta vs baseline.
pub fn format_results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("method,f1_avg,f1_std,f1_delta_vs_base,er_avg,er_std,er_delta_vs_base\n");
    for row in rows {
        let delta = |d: Option<f64>| d.map_or(String::new(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{},{:.4},{:.4},{},{:.4},{:.4},{}\n",
            row.label,
            row.aggregate.f1_mean,
            row.aggregate.f1_std,
            delta(row.delta_f1_vs_base),
            row.aggregate.er_mean,
            row.aggregate.er_std,
            delta(row.delta_er_vs_base),
        ));
    }
    out
}

/// Plain-text report block: per-run lines plus the aggregate.
pub fn format_report_text(label: &str, reports: &[EvalReport], aggregate: &Aggregate) -> String {
    let mut out = format!("== {label}\n");
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!(
            "run {i:02}: F1 {:.4}  ER {:.4}  (TP {} FP {} FN {} N_ref {})\n",
            r.f1, r.er, r.counts.tp, r.counts.fp, r.counts.fn_, r.counts.n_ref
        ));
    }
    out.push_str(&format!(
        "aggregate over {} runs: F1 {:.4} +- {:.4}, ER {:.4} +- {:.4}\n",
        aggregate.runs, aggregate.f1_mean, aggregate.f1_std, aggregate.er_mean, aggregate.er_std
    ));
    out
}
