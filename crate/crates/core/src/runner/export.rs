//! Tidy CSV exports from a run directory.
//!
//! Every export is a pure function of the directory contents (config copy +
//! metrics CSV), so copying a run directory elsewhere reproduces identical
//! exports. The spike-rate export recomputes the indicator from the logged
//! norms rather than trusting the logged spike column, giving an independent
//! recomputation route for cross-checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::instability::spike_indicator;
use crate::runner::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    RewardCurve,
    SpikeRate,
    ThresholdCurve,
    RatioNormScatter,
}

impl ExportKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reward_curve" => Ok(ExportKind::RewardCurve),
            "spike_rate" => Ok(ExportKind::SpikeRate),
            "threshold_curve" => Ok(ExportKind::ThresholdCurve),
            "ratio_norm_scatter" => Ok(ExportKind::RatioNormScatter),
            other => Err(Error::usage(format!(
                "unknown export kind '{other}' (expected reward_curve, spike_rate, \
                 threshold_curve, or ratio_norm_scatter)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExportKind::RewardCurve => "reward_curve",
            ExportKind::SpikeRate => "spike_rate",
            ExportKind::ThresholdCurve => "threshold_curve",
            ExportKind::RatioNormScatter => "ratio_norm_scatter",
        }
    }
}

/// A parsed metrics row, keyed by column name so appended columns stay
/// readable by older exports.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    fields: BTreeMap<String, String>,
}

impl MetricsRow {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(|s| s.as_str())
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        let raw = self.fields.get(key)?;
        if raw.is_empty() {
            return None;
        }
        raw.parse::<f64>().ok()
    }
}

/// Read the metrics table of a run directory.
pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(run_dir.join("metrics.csv"))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::validation("metrics.csv is empty"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != columns.len() {
            return Err(Error::validation("metrics row width differs from header"));
        }
        let fields = columns
            .iter()
            .zip(values)
            .map(|(c, v)| (c.to_string(), v.to_string()))
            .collect();
        rows.push(MetricsRow { fields });
    }
    Ok(rows)
}

/// Emit one export kind as `exports/<kind>.csv` inside the run directory and
/// return the written path.
pub fn export_plot_data(run_dir: &Path, kind: ExportKind) -> Result<PathBuf> {
    let config = RunConfig::load(&run_dir.join("config.txt"))?;
    let rows = read_metrics(run_dir)?;
    let export_dir = run_dir.join("exports");
    std::fs::create_dir_all(&export_dir)?;
    let path = export_dir.join(format!("{}.csv", kind.name()));

    let mut out = String::new();
    match kind {
        ExportKind::RewardCurve => {
            out.push_str("step,reward_mean\n");
            for row in &rows {
                let first_inner = row.get("inner_step") == Some("1");
                let first_group = row.get("group_index").map_or(true, |g| g == "0");
                if first_inner && first_group {
                    out.push_str(&format!(
                        "{},{}\n",
                        row.get("step").unwrap_or(""),
                        row.get("reward_mean").unwrap_or("")
                    ));
                }
            }
        }
        ExportKind::SpikeRate => {
            out.push_str("step,spike\n");
            // Independent recomputation from the logged norms.
            let mut history: Vec<f64> = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                let norm = row.num("update_norm").unwrap_or(f64::NAN);
                let check =
                    spike_indicator(&history, norm, config.spike_window, config.spike_delta);
                if norm.is_finite() {
                    history.push(norm);
                }
                out.push_str(&format!("{},{}\n", i, u8::from(check.spike)));
            }
        }
        ExportKind::ThresholdCurve => {
            out.push_str("step,spike_threshold\n");
            for (i, row) in rows.iter().enumerate() {
                if let Some(th) = row.num("spike_threshold") {
                    out.push_str(&format!("{i},{th}\n"));
                }
            }
        }
        ExportKind::RatioNormScatter => {
            out.push_str("log10_ratio,log10_update_norm\n");
            for row in &rows {
                let (Some(lr), Some(norm)) =
                    (row.num("log10_ratio_max"), row.num("update_norm"))
                else {
                    continue;
                };
                if !lr.is_finite() || !norm.is_finite() || norm <= 0.0 {
                    continue;
                }
                out.push_str(&format!("{},{}\n", lr, norm.log10()));
            }
        }
    }
    std::fs::write(&path, out)?;
    Ok(path)
}
