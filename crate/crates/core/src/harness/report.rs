//! Report files and paired comparisons across seeds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError};
use crate::diagnostics::{DecileSummary, RegressionReport, SpearmanSummary};
use crate::model::train::{Condition, TeacherReport};

pub const SCHEMA_VERSION: &str = "heed.report.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub training: TeacherReport,
    pub param_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub stage_steps: [usize; 3],
    pub stage_tokens: [u64; 3],
    /// Mean loss over each stage's steps; absent for skipped stages.
    pub stage_mean_loss: [Option<f64>; 3],
    pub final_loss: Option<f64>,
    pub student_hash: String,
    pub frozen_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAccuracy {
    pub dense: f64,
    pub smooth: f64,
    pub n_dense: usize,
    pub n_smooth: usize,
}

/// Magnitudes reported for a large multimodal model, echoed for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub drift_deciles: (f64, f64),
    pub mask_deciles: (f64, f64),
    pub semi_partial_r2: [f64; 5],
}

impl Default for ReferenceValues {
    fn default() -> Self {
        use crate::diagnostics::{
            REFERENCE_DRIFT_DECILES, REFERENCE_MASK_DECILES, REFERENCE_SEMI_PARTIAL,
        };
        Self {
            drift_deciles: REFERENCE_DRIFT_DECILES,
            mask_deciles: REFERENCE_MASK_DECILES,
            semi_partial_r2: REFERENCE_SEMI_PARTIAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub n_samples: usize,
    /// Visual positions ranked by density; drift averaged over alignment taps.
    pub drift_deciles: DecileSummary,
    /// Visual positions ranked by density; teacher masking importance.
    pub mask_deciles: Option<DecileSummary>,
    /// Drift on density, token type, layer depth and teacher attention, one row per (sample, tap, position).
    pub regression: RegressionReport,
    /// Per-image Spearman between visual density and layer-summed squared teacher gradient norm.
    pub density_gradient_spearman: SpearmanSummary,
    pub reference: ReferenceValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub kind: String,
    pub condition: Condition,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub commit: Option<String>,
    pub config: ExperimentConfig,
    pub teacher: TeacherSummary,
    pub training: TrainingSummary,
    pub accuracy: EvalAccuracy,
    pub diagnostics: RunDiagnostics,
}

impl RunReport {
    /// Value of a comparison metric; `None` when undefined.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let v = match name {
            "dense_accuracy" => self.accuracy.dense,
            "smooth_accuracy" => self.accuracy.smooth,
            "drift_ratio" => self.diagnostics.drift_deciles.ratio,
            _ => return None,
        };
        v.is_finite().then_some(v)
    }
}

/// Diagnostics of a stand-alone student checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: String,
    pub kind: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub seed: u64,
    pub teacher_hash: String,
    pub student_hash: String,
    pub diagnostics: RunDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation of the differences; absent for a single pair.
    pub sd: Option<f64>,
    /// `sd / sqrt(n)`.
    pub se: Option<f64>,
}

/// Mean and standard error of paired differences.
pub fn paired_stats(deltas: &[f64]) -> Option<PairedStats> {
    let n = deltas.len();
    if n == 0 {
        return None;
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let sd = (n > 1)
        .then(|| (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(PairedStats {
        n,
        mean,
        sd,
        se: sd.map(|s| s / (n as f64).sqrt()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    /// Absent when either run is missing for this seed.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `"C4-C3"` style label: first condition minus second.
    pub name: String,
    pub metric: String,
    pub per_seed: Vec<SeedDelta>,
    pub stats: Option<PairedStats>,
}

pub const COMPARISON_PAIRS: [(Condition, Condition); 2] = [
    (Condition::C4, Condition::C3),
    (Condition::C4, Condition::C1),
];
pub const COMPARISON_METRICS: [&str; 3] = ["dense_accuracy", "smooth_accuracy", "drift_ratio"];

/// Paired per-seed deltas for C4-C3 and C4-C1 over reports sharing one config.
pub fn compare_conditions(reports: &[RunReport]) -> Result<Vec<Comparison>, HarnessError> {
    if reports.len() < 2 {
        return Err(HarnessError::Config(format!(
            "need at least 2 reports, got {}",
            reports.len()
        )));
    }
    let hash = &reports[0].config_hash;
    if let Some(r) = reports.iter().find(|r| &r.config_hash != hash) {
        return Err(HarnessError::HashMismatch(
            hash.clone(),
            r.config_hash.clone(),
        ));
    }
    let mut seen = BTreeSet::new();
    if let Some(r) = reports.iter().find(|r| !seen.insert((r.condition, r.seed))) {
        return Err(HarnessError::Config(format!(
            "duplicate report for {} seed {}",
            r.condition, r.seed
        )));
    }
    let seeds: BTreeSet<u64> = reports.iter().map(|r| r.seed).collect();
    let find = |c: Condition, s: u64| reports.iter().find(|r| r.condition == c && r.seed == s);
    let present = |c: Condition| reports.iter().any(|r| r.condition == c);
    let mut out = Vec::new();
    for (a, b) in COMPARISON_PAIRS {
        if !present(a) || !present(b) {
            continue;
        }
        for metric in COMPARISON_METRICS {
            let per_seed: Vec<SeedDelta> = seeds
                .iter()
                .map(|&seed| SeedDelta {
                    seed,
                    delta: match (
                        find(a, seed).and_then(|r| r.metric(metric)),
                        find(b, seed).and_then(|r| r.metric(metric)),
                    ) {
                        (Some(x), Some(y)) => Some(x - y),
                        _ => None,
                    },
                })
                .collect();
            let deltas: Vec<f64> = per_seed.iter().filter_map(|d| d.delta).collect();
            out.push(Comparison {
                name: format!("{a}-{b}"),
                metric: metric.to_string(),
                stats: paired_stats(&deltas),
                per_seed,
            });
        }
    }
    Ok(out)
}

/// Plain-text table of comparisons.
pub fn comparison_table(comparisons: &[Comparison]) -> String {
    let mut s = format!(
        "{:<8} {:<16} {:>10} {:>10} {:>4}  per-seed\n",
        "pair", "metric", "mean", "se", "n"
    );
    for c in comparisons {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let (mean, se, n) = match &c.stats {
            Some(p) => (Some(p.mean), p.se, p.n),
            None => (None, None, 0),
        };
        let seeds: Vec<String> = c
            .per_seed
            .iter()
            .map(|d| format!("{}:{}", d.seed, fmt(d.delta)))
            .collect();
        s.push_str(&format!(
            "{:<8} {:<16} {:>10} {:>10} {:>4}  {}\n",
            c.name,
            c.metric,
            fmt(mean),
            fmt(se),
            n,
            seeds.join(" ")
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub condition: Condition,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub dense_accuracy: Option<f64>,
    pub smooth_accuracy: Option<f64>,
    pub drift_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: String,
    pub kind: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub runs: Vec<RunSummary>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub k_percent: f64,
    /// Dense-task accuracy of the density-targeted arm.
    pub density: f64,
    /// Dense-task accuracy of each random arm, in random-seed order.
    pub random: Vec<f64>,
    pub random_mean: f64,
    pub random_sd: Option<f64>,
    /// Density minus each random arm.
    pub paired: Option<PairedStats>,
    /// True when a single run stands in for both arms (nothing is boosted).
    pub shared_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCurve {
    pub seed: u64,
    pub random_seeds: Vec<u64>,
    pub rows: Vec<ControlRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub schema_version: String,
    pub kind: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    pub boost: f64,
    pub curves: Vec<ControlCurve>,
    pub reference: ReferenceControl,
}

/// Control curve reported for a large model on a text-recognition benchmark,
/// in benchmark points; not comparable in absolute terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceControl {
    pub k_percent: [f64; 3],
    pub baseline: f64,
    pub density: [f64; 3],
    pub random: [f64; 3],
}

impl Default for ReferenceControl {
    fn default() -> Self {
        Self {
            k_percent: [10.0, 25.0, 50.0],
            baseline: 50.5,
            density: [54.0, 58.0, 58.7],
            random: [51.5, 52.8, 54.0],
        }
    }
}

/// Removes timestamp fields at any depth so report bodies can be compared.
pub fn strip_volatile(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("generated_at");
            map.values_mut().for_each(strip_volatile);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_stats_examples() {
        assert_eq!(paired_stats(&[]), None);
        let one = paired_stats(&[0.5]).unwrap();
        assert_eq!((one.mean, one.sd, one.se), (0.5, None, None));
        // deltas 1, 2, 6: mean 3, sample variance (4 + 1 + 9) / 2 = 7
        let p = paired_stats(&[1.0, 2.0, 6.0]).unwrap();
        assert_eq!(p.mean, 3.0);
        assert!((p.sd.unwrap() - 7f64.sqrt()).abs() < 1e-15);
        assert!((p.se.unwrap() - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn strip_removes_nested_timestamps() {
        let mut v = serde_json::json!({"generated_at": 5, "a": [{"generated_at": 1, "b": 2}]});
        strip_volatile(&mut v);
        assert_eq!(v, serde_json::json!({"a": [{"b": 2}]}));
    }
}
