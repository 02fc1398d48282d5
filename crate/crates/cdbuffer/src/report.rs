//! Run reports (JSON) and per-step series (CSV).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use cdbuffer_core::engine::StepReport;

use crate::config::{ExperimentConfig, SeedPlan};
use crate::error::RunResult;

pub const REPORT_SCHEMA: &str = "cdbuffer-report-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub segment: usize,
    pub loss_align: f64,
    pub loss_mask: f64,
    pub loss_total: f64,
    pub suppressed: usize,
    pub reactivated: usize,
    pub tau: f64,
    pub layer_discrepancy: Vec<f64>,
    pub accuracy: Option<f64>,
}

impl From<&StepReport> for StepRecord {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            segment: r.segment,
            loss_align: r.loss_align,
            loss_mask: r.loss_mask,
            loss_total: r.loss_total,
            suppressed: r.suppressed_count,
            reactivated: r.reactivated_count,
            tau: r.tau,
            layer_discrepancy: r.layer_discrepancy.clone(),
            accuracy: r.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of adaptation steps taken before the evaluation.
    pub after_steps: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityDiscrepancy {
    pub kind: String,
    pub severity: f64,
    /// Mean over steps of the layer-averaged discrepancy.
    pub mean_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub direct_accuracy: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub mean_discrepancy: Vec<SeverityDiscrepancy>,
    /// Suppressed-channel count -> number of steps with that count.
    pub suppressed_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: SeedPlan,
    pub model_hash: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub summary: Summary,
    /// Only filled when timing is requested, so reports stay reproducible.
    pub wall_clock_ms: Option<u64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean of the per-layer discrepancies of one step.
pub fn mean_layer_discrepancy(r: &StepRecord) -> f64 {
    if r.layer_discrepancy.is_empty() {
        return 0.0;
    }
    r.layer_discrepancy.iter().sum::<f64>() / r.layer_discrepancy.len() as f64
}

/// `step,loss_align,loss_mask,loss_total,suppressed,reactivated,accuracy`,
/// accuracy blank on steps without an evaluation.
pub fn write_step_csv<W: Write>(out: W, steps: &[StepRecord]) -> RunResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss_align", "loss_mask", "loss_total", "suppressed", "reactivated", "accuracy"])?;
    for s in steps {
        w.write_record([
            s.step.to_string(),
            s.loss_align.to_string(),
            s.loss_mask.to_string(),
            s.loss_total.to_string(),
            s.suppressed.to_string(),
            s.reactivated.to_string(),
            s.accuracy.map_or(String::new(), |a| a.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
