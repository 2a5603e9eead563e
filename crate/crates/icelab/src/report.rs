//! Result files: `report.json` (full detail), `report.csv` (the fixed
//! six-column table), and `trace.jsonl` (per-step optimization
//! traces). Reports never carry timestamps, so identical runs produce
//! byte-identical files; wall-clock context lives in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use icelab_core::editing::{EditConfig, StepTrace};
use icelab_core::metrics::{EditEvaluation, MetricsSummary};

use crate::{HarnessError, Result};

/// One edited record's results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordReport {
    pub index: usize,
    pub prompt: String,
    pub target_new: String,
    pub converged: bool,
    pub steps_run: usize,
    pub edit_succ: bool,
    pub portability: f64,
    pub locality: f64,
    pub fluency: f64,
    pub ppl: f64,
    pub ppl_r: f64,
    /// Exact consistency gap, averaged over the record's contexts,
    /// before and after the edit.
    pub pre_gap: f64,
    pub post_gap: f64,
    pub p_target_before: f64,
    pub p_target_after: f64,
    pub final_ft_loss: f64,
    pub final_combined_loss: f64,
}

impl RecordReport {
    pub fn evaluation(&self) -> EditEvaluation {
        EditEvaluation {
            edit_success: self.edit_succ,
            portability: self.portability,
            locality: self.locality,
            fluency: self.fluency,
            ppl: self.ppl,
            ppl_r: self.ppl_r,
        }
    }
}

/// A whole run: configuration echo, per-record detail, aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub variant: String,
    pub seed: u64,
    pub edit_config: EditConfig,
    pub summary: MetricsSummary,
    pub records: Vec<RecordReport>,
}

/// Serialize `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::io("encoding json", e))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| HarnessError::io(&format!("writing {}", path.display()), e))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::io(&format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::io(&format!("parsing {}", path.display()), e))
}

/// Format a float for the CSV: shortest round-trip form, with
/// non-finite values spelled `inf`/`nan`.
fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x}")
    }
}

pub const CSV_HEADER: &str = "edit_succ,portability,locality,fluency,ppl,ppl_r";

/// The six-column results table, one row per record, success as 0/1.
pub fn to_csv(records: &[RecordReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            if r.edit_succ { 1 } else { 0 },
            fmt_f64(r.portability),
            fmt_f64(r.locality),
            fmt_f64(r.fluency),
            fmt_f64(r.ppl),
            fmt_f64(r.ppl_r),
        ));
    }
    out
}

pub fn write_csv(path: &Path, records: &[RecordReport]) -> Result<()> {
    fs::write(path, to_csv(records))
        .map_err(|e| HarnessError::io(&format!("writing {}", path.display()), e))
}

/// Per-record optimization traces, one JSON object per line.
pub fn write_traces(path: &Path, traces: &[(usize, Vec<StepTrace>)]) -> Result<()> {
    let mut out = String::new();
    for (record, steps) in traces {
        for t in steps {
            #[derive(Serialize)]
            struct Line<'a> {
                record: usize,
                #[serde(flatten)]
                step: &'a StepTrace,
            }
            let line = serde_json::to_string(&Line { record: *record, step: t })
                .map_err(|e| HarnessError::io("encoding trace", e))?;
            out.push_str(&line);
            out.push('\n');
        }
    }
    fs::write(path, out)
        .map_err(|e| HarnessError::io(&format!("writing {}", path.display()), e))
}

/// Merge several run reports into one comparison table. Columns are
/// the summary aggregates; runs missing a metric (for example a
/// non-finite perplexity mean) show `absent`.
pub fn merge_table(reports: &[RunReport]) -> String {
    let mut out = String::from(
        "command,variant,records,edit_succ_pct,portability_pct,locality_pct,fluency_mean,ppl_mean,ppl_r_mean\n",
    );
    for r in reports {
        let cell = |x: f64| {
            if x.is_finite() { format!("{x:.4}") } else { "absent".to_string() }
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.command,
            r.variant,
            r.summary.records,
            cell(r.summary.edit_succ_pct),
            cell(r.summary.portability_pct),
            cell(r.summary.locality_pct),
            cell(r.summary.fluency_mean),
            cell(r.summary.ppl_mean),
            cell(r.summary.ppl_r_mean),
        ));
    }
    out
}
