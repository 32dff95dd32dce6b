//! CSV emission for run and ablation reports. Column layouts are frozen:
//! downstream comparisons rely on byte-stable output for identical runs,
//! so values go through the default `f64` Display (never scientific).

use std::fmt::Write as _;

use fedema_core::orchestrator::ExperimentReport;

pub const METRICS_HEADER: &str =
    "round,algo,lambda,window,miou_cur,miou_hist_mean,mf1,mpre,mrec,mean_obj,grad_norm_sq";

pub const ABLATION_HEADER: &str =
    "axis,value,seed,rounds_to_threshold,final_miou,final_hist_mean,forgetting";

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One row per round, metrics taken from the fused (EMA) model.
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    let algo = report.config.algorithm.tag();
    let lambda = report.config.effective_lambda();
    let window = report.config.window_tag();
    for rec in &report.records {
        let hist_mean = mean(&rec.ema_historical_miou);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            rec.round,
            algo,
            lambda,
            window,
            rec.ema_current.miou,
            hist_mean,
            rec.ema_current.mf1,
            rec.ema_current.mprecision,
            rec.ema_current.mrecall,
            rec.mean_objective,
            rec.grad_norm_sq,
        )
        .expect("string write");
    }
    out
}

/// One ablation row, long format: a single (axis, value, seed) cell.
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub rounds_to_threshold: usize,
    pub final_miou: f64,
    pub final_hist_mean: f64,
    pub forgetting: Option<f64>,
}

impl AblationRow {
    pub fn from_report(axis: &str, value: &str, seed: u64, report: &ExperimentReport) -> Self {
        let last = report.records.last();
        AblationRow {
            axis: axis.to_string(),
            value: value.to_string(),
            seed,
            rounds_to_threshold: report.rounds_to_threshold,
            final_miou: last.map_or(0.0, |r| r.ema_current.miou),
            final_hist_mean: last.map_or(0.0, |r| mean(&r.ema_historical_miou)),
            forgetting: report.forgetting,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(ABLATION_HEADER);
    out.push('\n');
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.axis,
            row.value,
            row.seed,
            row.rounds_to_threshold,
            row.final_miou,
            row.final_hist_mean,
            row.forgetting.map_or(String::new(), |f| f.to_string()),
        )
        .expect("string write");
    }
    out
}
