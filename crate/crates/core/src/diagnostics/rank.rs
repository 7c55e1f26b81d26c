//! Spearman rank correlation with average ranks for ties.

use serde::{Deserialize, Serialize};

use super::StatsError;

/// Fractional ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation. `Ok(None)` when either argument has no rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: x.len(),
        });
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Per-image Spearman correlations averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanSummary {
    /// Mean over images with a defined correlation.
    pub mean: Option<f64>,
    pub n_used: usize,
    pub n_undefined: usize,
    /// Same, restricted to each image's top quarter of positions by `x`.
    pub tail_mean: Option<f64>,
    pub tail_n_used: usize,
    pub tail_n_undefined: usize,
}

/// Indices of the top `ceil(n/4)` entries of `x`, ties broken by lower index.
pub fn top_quartile(x: &[f64]) -> Vec<usize> {
    let m = x.len().div_ceil(4);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    order.truncate(m);
    order.sort_unstable();
    order
}

fn mean_defined(values: &[Option<f64>]) -> (Option<f64>, usize, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
    (mean, n, values.len() - n)
}

/// Mean per-image Spearman between `x` and `y`, overall and in the top-25% tail by `x`.
pub fn mean_per_image_spearman(
    groups: &[(Vec<f64>, Vec<f64>)],
) -> Result<SpearmanSummary, StatsError> {
    let mut overall = Vec::with_capacity(groups.len());
    let mut tail = Vec::with_capacity(groups.len());
    for (x, y) in groups {
        overall.push(spearman(x, y)?);
        let idx = top_quartile(x);
        if idx.len() < 2 {
            tail.push(None);
            continue;
        }
        let tx: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ty: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        tail.push(spearman(&tx, &ty)?);
    }
    let (mean, n_used, n_undefined) = mean_defined(&overall);
    let (tail_mean, tail_n_used, tail_n_undefined) = mean_defined(&tail);
    Ok(SpearmanSummary {
        mean,
        n_used,
        n_undefined,
        tail_mean,
        tail_n_used,
        tail_n_undefined,
    })
}

/// Mean pairwise Spearman between rows, e.g. per-layer sensitivities of one image.
pub fn mean_pairwise_spearman(rows: &[Vec<f64>]) -> Result<Option<f64>, StatsError> {
    let mut values = Vec::new();
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            values.push(spearman(&rows[a], &rows[b])?);
        }
    }
    Ok(mean_defined(&values).0)
}
