//! Report assembly and rendering.
//!
//! Reports are deterministic: same outcomes and config hash produce the same
//! bytes. Nothing time-dependent is allowed in here; wall-clock bookkeeping
//! lives in the run manifest instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{accuracy, attack_success_rate, mean_ndcg, selection_rate, QueryOutcome};
use crate::eval::stats::format_delta;

/// Headline metrics for one experimental condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBlock {
    pub n_queries: usize,
    pub accuracy: f64,
    pub asr: f64,
    pub selection_rate: f64,
    /// Mean NDCG over the queries where it is defined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    /// Queries excluded from the NDCG mean for having no poison docs.
    pub ndcg_excluded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nes_mean: Option<f64>,
    pub nes_count: usize,
}

/// Computes the block from per-query outcomes at cutoff `k`.
pub fn metric_block(outcomes: &[QueryOutcome], k: usize) -> MetricBlock {
    let (ndcg, ndcg_excluded) = mean_ndcg(outcomes, k);
    let nes_scores: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.nes_sample.as_ref().map(|s| s.score as f64))
        .collect();
    let nes_mean = if nes_scores.is_empty() {
        None
    } else {
        Some(nes_scores.iter().sum::<f64>() / nes_scores.len() as f64)
    };
    MetricBlock {
        n_queries: outcomes.len(),
        accuracy: accuracy(outcomes),
        asr: attack_success_rate(outcomes),
        selection_rate: selection_rate(outcomes),
        ndcg,
        ndcg_excluded,
        nes_mean,
        nes_count: nes_scores.len(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub metrics: MetricBlock,
    /// Relative changes against the clean condition, pre-rendered.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub deltas: BTreeMap<String, String>,
}

/// One line of the per-query breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQueryRow {
    pub query_id: String,
    pub n_poisoned_retrieved: usize,
    pub answered_correctly: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nes: Option<u8>,
    pub closed_book: bool,
    pub defense_fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub config_hash: String,
    pub k: usize,
    pub conditions: Vec<ConditionReport>,
    /// Condition name to its per-query rows, sorted by query id.
    pub per_query: BTreeMap<String, Vec<PerQueryRow>>,
}

/// Assembles the report. When a condition named "clean" is present, every
/// other condition gets deltas computed against it.
pub fn build_report(
    tool: impl Into<String>,
    config_hash: impl Into<String>,
    k: usize,
    conditions: Vec<(String, Vec<QueryOutcome>)>,
    mut per_query: BTreeMap<String, Vec<PerQueryRow>>,
) -> Report {
    let blocks: Vec<(String, MetricBlock)> = conditions
        .iter()
        .map(|(name, outcomes)| (name.clone(), metric_block(outcomes, k)))
        .collect();
    let clean = blocks
        .iter()
        .find(|(name, _)| name == "clean")
        .map(|(_, block)| block.clone());

    let condition_reports = blocks
        .into_iter()
        .map(|(name, metrics)| {
            let mut deltas = BTreeMap::new();
            if name != "clean" {
                if let Some(base) = &clean {
                    deltas.insert(
                        "accuracy_vs_clean".to_string(),
                        format_delta(base.accuracy, metrics.accuracy),
                    );
                    deltas.insert(
                        "asr_vs_clean".to_string(),
                        format_delta(base.asr, metrics.asr),
                    );
                    deltas.insert(
                        "selection_rate_vs_clean".to_string(),
                        format_delta(base.selection_rate, metrics.selection_rate),
                    );
                    let ndcg_delta = match (base.ndcg, metrics.ndcg) {
                        (Some(b), Some(a)) => format_delta(b, a),
                        _ => "n/a".to_string(),
                    };
                    deltas.insert("ndcg_vs_clean".to_string(), ndcg_delta);
                }
            }
            ConditionReport { name, metrics, deltas }
        })
        .collect();

    for rows in per_query.values_mut() {
        rows.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    }
    Report {
        tool: tool.into(),
        config_hash: config_hash.into(),
        k,
        conditions: condition_reports,
        per_query,
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(v) => format!("{v:.prec$}"),
        None => "-".to_string(),
    }
}

/// Plain-text rendering: a metrics table, then the delta lines.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!("tool: {}\n", report.tool));
    out.push_str(&format!("config: {}\n", report.config_hash));
    out.push_str(&format!("k: {}\n\n", report.k));

    let header = format!(
        "{:<16} {:>6} {:>9} {:>7} {:>9} {:>8} {:>6}\n",
        "condition", "n", "accuracy", "asr", "sel_rate", "ndcg", "nes"
    );
    out.push_str(&header);
    out.push_str(&"-".repeat(header.len() - 1));
    out.push('\n');
    for cond in &report.conditions {
        let m = &cond.metrics;
        out.push_str(&format!(
            "{:<16} {:>6} {:>9.3} {:>7.3} {:>9.3} {:>8} {:>6}\n",
            cond.name,
            m.n_queries,
            m.accuracy,
            m.asr,
            m.selection_rate,
            fmt_opt(m.ndcg, 4),
            fmt_opt(m.nes_mean, 2),
        ));
    }
    for cond in &report.conditions {
        if cond.deltas.is_empty() {
            continue;
        }
        out.push('\n');
        out.push_str(&format!("{} vs clean:\n", cond.name));
        for (key, value) in &cond.deltas {
            let label = key.trim_end_matches("_vs_clean").replace('_', " ");
            out.push_str(&format!("  {label}: {value}\n"));
        }
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Condition-level CSV, one row per condition.
pub fn render_csv(report: &Report) -> String {
    let mut out = String::from(
        "condition,n_queries,accuracy,asr,selection_rate,ndcg,ndcg_excluded,nes_mean,nes_count\n",
    );
    for cond in &report.conditions {
        let m = &cond.metrics;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{},{}\n",
            csv_escape(&cond.name),
            m.n_queries,
            m.accuracy,
            m.asr,
            m.selection_rate,
            m.ndcg.map(|v| format!("{v:.6}")).unwrap_or_default(),
            m.ndcg_excluded,
            m.nes_mean.map(|v| format!("{v:.6}")).unwrap_or_default(),
            m.nes_count,
        ));
    }
    out
}
