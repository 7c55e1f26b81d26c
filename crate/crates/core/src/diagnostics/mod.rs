//! Measurement utilities: residual drift, decile summaries, masking importance,
//! regression with semi-partial R², bootstrap intervals and rank correlations.

mod bootstrap;
mod measure;
mod rank;
mod regression;
pub mod table;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::ResidualTrace;

pub use bootstrap::{bootstrap_ci, bootstrap_draws, percentile, percentile_interval};
pub use measure::{answer_score, attention_received, mask_importance, token_records};
pub use rank::{
    average_ranks, mean_pairwise_spearman, mean_per_image_spearman, spearman, top_quartile,
    SpearmanSummary,
};
pub use regression::{regress_records, semi_partial_r2, RegressionBootstrap, RegressionReport};

/// Reference decile magnitudes reported for a large multimodal model (bottom, top).
/// Kept for comparison in reports; the toy setting does not reproduce them.
pub const REFERENCE_DRIFT_DECILES: (f64, f64) = (0.078, 0.281);
pub const REFERENCE_MASK_DECILES: (f64, f64) = (0.041, 0.143);
/// Reference semi-partial R² values: density, token type, layer depth, teacher attention, joint.
pub const REFERENCE_SEMI_PARTIAL: [f64; 5] = [0.30, 0.10, 0.08, 0.05, 0.53];
/// Predictor names, in column order of [`TokenRecord::predictors`].
pub const PREDICTORS: [&str; 4] = ["density", "token_type", "layer_depth", "teacher_attention"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("target has zero variance")]
    ConstantTarget,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("statistic failed on resample {index}: {source}")]
    Resample {
        index: usize,
        #[source]
        source: Box<StatsError>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenType {
    Visual,
    Text,
}

/// One (image, layer, position) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub image_id: u64,
    pub position: usize,
    pub layer: usize,
    /// Normalized layer index in `[0, 1]`.
    pub layer_depth: f64,
    pub token_type: TokenType,
    /// Normalized density in `[0, 1]`.
    pub density: f64,
    pub teacher_attention: f64,
    pub drift: f64,
    pub mask_importance: Option<f64>,
}

impl TokenRecord {
    /// Regression predictors in the order of [`PREDICTORS`].
    pub fn predictors(&self) -> [f64; 4] {
        let visual = if self.token_type == TokenType::Visual {
            1.0
        } else {
            0.0
        };
        [
            self.density,
            visual,
            self.layer_depth,
            self.teacher_attention,
        ]
    }
}

/// Per-layer, per-position Euclidean distance between student and teacher residuals.
/// Returns an `L x T` array.
pub fn residual_drift(
    student: &ResidualTrace,
    teacher: &ResidualTrace,
) -> Result<Array2<f64>, StatsError> {
    if student.layers != teacher.layers || student.residuals.len() != teacher.residuals.len() {
        return Err(StatsError::ShapeMismatch(format!(
            "layers {:?} vs {:?}",
            student.layers, teacher.layers
        )));
    }
    let (t, _) = student.residuals.first().map_or((0, 0), |r| r.dim());
    let mut out = Array2::zeros((student.residuals.len(), t));
    for (l, (s, r)) in student.residuals.iter().zip(&teacher.residuals).enumerate() {
        if s.dim() != r.dim() || s.nrows() != t {
            return Err(StatsError::ShapeMismatch(format!(
                "layer {l}: {:?} vs {:?}",
                s.dim(),
                r.dim()
            )));
        }
        let diff = s - r;
        for (p, row) in diff.axis_iter(Axis(0)).enumerate() {
            out[[l, p]] = row.dot(&row).sqrt();
        }
    }
    Ok(out)
}

/// Means of `values` in ten score-ordered groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileSummary {
    /// Group means from lowest to highest score.
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
    /// `means[9] / means[0]`; infinite when only the bottom mean is zero.
    #[serde(with = "inf_marker")]
    pub ratio: f64,
}

/// Serializes infinite ratios as the string `"inf"` so reports stay valid JSON.
pub mod inf_marker {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Marker(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Marker(if *v > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Marker(m) if m == "inf" => Ok(f64::INFINITY),
            Repr::Marker(m) if m == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Marker(m) => Err(serde::de::Error::custom(format!("unexpected marker {m:?}"))),
        }
    }
}

/// Sorts by `scores` (stable, ascending), splits into ten groups whose sizes
/// differ by at most one with the larger groups at the bottom, and averages `values`.
pub fn decile_summary(scores: &[f64], values: &[f64]) -> Result<DecileSummary, StatsError> {
    if scores.len() != values.len() {
        return Err(StatsError::LengthMismatch(scores.len(), values.len()));
    }
    let n = scores.len();
    if n < 10 {
        return Err(StatsError::TooFew { needed: 10, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (base, rem) = (n / 10, n % 10);
    let mut means = Vec::with_capacity(10);
    let mut counts = Vec::with_capacity(10);
    let mut start = 0;
    for g in 0..10 {
        let size = base + usize::from(g < rem);
        let sum: f64 = order[start..start + size].iter().map(|&i| values[i]).sum();
        means.push(sum / size as f64);
        counts.push(size);
        start += size;
    }
    let (bottom, top) = (means[0], means[9]);
    let ratio = if bottom == 0.0 {
        if top == 0.0 {
            1.0
        } else {
            f64::INFINITY.copysign(top)
        }
    } else {
        top / bottom
    };
    Ok(DecileSummary {
        means,
        counts,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn trace(residuals: Vec<Array2<f64>>) -> ResidualTrace {
        ResidualTrace {
            layers: (0..residuals.len()).collect(),
            residuals,
            logits: Array2::zeros((0, 0)),
        }
    }

    #[test]
    fn drift_examples() {
        let a = trace(vec![array![[0.0, 0.0], [1.0, 1.0]]]);
        let b = trace(vec![array![[3.0, 4.0], [1.0, 1.0]]]);
        let d = residual_drift(&a, &b).unwrap();
        assert_eq!(d, array![[5.0, 0.0]]);
        assert_eq!(residual_drift(&a, &a).unwrap(), array![[0.0, 0.0]]);
        let c = trace(vec![array![[0.0, 0.0, 0.0]]]);
        assert!(residual_drift(&a, &c).is_err());
    }

    #[test]
    fn drift_is_rotation_invariant() {
        let (c, s) = (0.6f64, 0.8f64);
        let rot = array![[c, -s], [s, c]];
        let a = array![[1.0, 2.0], [-0.5, 3.0], [2.0, 2.0]];
        let b = array![[0.0, 1.0], [1.5, -1.0], [2.0, 2.5]];
        let plain = residual_drift(&trace(vec![a.clone()]), &trace(vec![b.clone()])).unwrap();
        let rotated = residual_drift(&trace(vec![a.dot(&rot)]), &trace(vec![b.dot(&rot)])).unwrap();
        for (x, y) in plain.iter().zip(&rotated) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Sort-then-chunk oracle that builds group boundaries from cumulative sizes.
    fn naive_deciles(scores: &[f64], values: &[f64]) -> Vec<f64> {
        let mut pairs: Vec<(f64, usize, f64)> = scores
            .iter()
            .zip(values)
            .enumerate()
            .map(|(i, (s, v))| (*s, i, *v))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let n = pairs.len();
        let mut bounds = vec![0];
        for g in 0..10 {
            let size = n / 10 + if g < n % 10 { 1 } else { 0 };
            bounds.push(bounds[g] + size);
        }
        (0..10)
            .map(|g| {
                let chunk = &pairs[bounds[g]..bounds[g + 1]];
                chunk.iter().map(|p| p.2).sum::<f64>() / chunk.len() as f64
            })
            .collect()
    }

    #[test]
    fn deciles_of_ranks() {
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
        let values = scores.clone();
        let s = decile_summary(&scores, &values).unwrap();
        let expected: Vec<f64> = (0..10).map(|g| 2.0 * g as f64 + 0.5).collect();
        assert_eq!(s.means, expected);
        assert_eq!(s.means, naive_deciles(&scores, &values));
        assert_eq!(s.counts, vec![2; 10]);
        assert!((s.ratio - 18.5 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn remainder_goes_to_lowest_groups() {
        let scores: Vec<f64> = (0..23).map(f64::from).collect();
        let s = decile_summary(&scores, &scores).unwrap();
        assert_eq!(s.counts, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(s.means, naive_deciles(&scores, &scores));
    }

    #[test]
    fn decile_edge_cases() {
        let s = decile_summary(&[1.0; 10], &[2.0; 10]).unwrap();
        assert_eq!(s.ratio, 1.0);
        let s = decile_summary(&[1.0; 10], &[0.0; 10]).unwrap();
        assert_eq!(s.ratio, 1.0);
        let scores: Vec<f64> = (0..10).map(f64::from).collect();
        let mut values = vec![0.0; 10];
        values[9] = 1.0;
        let s = decile_summary(&scores, &values).unwrap();
        assert!(s.ratio.is_infinite());
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"inf\""));
        let back: DecileSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(decile_summary(&[1.0; 9], &[1.0; 9]).is_err());
    }

    proptest! {
        #[test]
        fn deciles_match_oracle(
            data in prop::collection::vec((-100.0f64..100.0, 0.0f64..10.0), 10..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let values: Vec<f64> = data.iter().map(|d| d.1).collect();
            let s = decile_summary(&scores, &values).unwrap();
            let oracle = naive_deciles(&scores, &values);
            for (a, b) in s.means.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn ratio_depends_only_on_ranking(
            data in prop::collection::vec((-3.0f64..3.0, 0.1f64..10.0), 10..100)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let values: Vec<f64> = data.iter().map(|d| d.1).collect();
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 4.0 - 1.0).collect();
            let a = decile_summary(&scores, &values).unwrap();
            let b = decile_summary(&warped, &values).unwrap();
            prop_assert_eq!(a.ratio, b.ratio);
        }
    }
}
