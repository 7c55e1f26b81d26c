//! Token-level OLS with semi-partial R² decomposition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_draws, percentile_interval};
use super::{StatsError, TokenRecord, PREDICTORS};

/// Point estimates, plus bootstrap intervals when computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub predictors: Vec<String>,
    pub n: usize,
    pub joint_r2: f64,
    pub semi_partial_r2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<RegressionBootstrap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBootstrap {
    pub n_resamples: usize,
    pub alpha: f64,
    pub joint_r2_ci: (f64, f64),
    pub semi_partial_r2_ci: Vec<(f64, f64)>,
    /// How often each predictor had the largest semi-partial R².
    pub largest_counts: Vec<usize>,
}

fn standardize(x: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>, StatsError> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(StatsError::RankDeficient(vec![names[j].clone()]));
        }
        col /= sd;
    }
    Ok(out)
}

/// R² of centred `y` regressed on centred, standardized columns of `x`.
fn r_squared(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sst: f64,
    names: &[String],
) -> Result<f64, StatsError> {
    if x.ncols() == 0 {
        return Ok(0.0);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let tol = 1e-9 * (x.nrows() as f64).sqrt();
    if let Some(j) = (0..r.ncols()).find(|&j| r[(j, j)].abs() < tol) {
        return Err(StatsError::RankDeficient(collinear_columns(x, j, names)));
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| StatsError::RankDeficient(names.to_vec()))?;
    let resid = y - x * beta;
    Ok((1.0 - resid.norm_squared() / sst).clamp(0.0, 1.0))
}

/// Column `j` and the earlier columns it is a combination of.
fn collinear_columns(x: &DMatrix<f64>, j: usize, names: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    if j > 0 {
        let prev = x.columns(0, j).into_owned();
        let target = x.column(j).into_owned();
        if let Ok(coef) = prev.clone().svd(true, true).solve(&target, 1e-12) {
            out.extend(
                coef.iter()
                    .enumerate()
                    .filter(|(_, c)| c.abs() > 1e-6)
                    .map(|(i, _)| names[i].clone()),
            );
        }
    }
    out.push(names[j].clone());
    out
}

/// OLS with intercept on standardized predictors; the semi-partial R² of
/// predictor `j` is the full-model R² minus the R² without `j`.
pub fn semi_partial_r2(
    x: &DMatrix<f64>,
    y: &[f64],
    names: &[String],
) -> Result<RegressionReport, StatsError> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(StatsError::LengthMismatch(n, y.len()));
    }
    if names.len() != p {
        return Err(StatsError::LengthMismatch(p, names.len()));
    }
    if n <= 5 {
        return Err(StatsError::TooFew { needed: 6, got: n });
    }
    let xs = standardize(x, names)?;
    let ymean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ymean));
    let sst = yc.norm_squared();
    if !(sst > 0.0) {
        return Err(StatsError::ConstantTarget);
    }

    let joint = r_squared(&xs, &yc, sst, names)?;
    let mut semi = Vec::with_capacity(p);
    for j in 0..p {
        let reduced = xs.clone().remove_column(j);
        let mut rnames = names.to_vec();
        rnames.remove(j);
        let r2 = r_squared(&reduced, &yc, sst, &rnames)?;
        semi.push((joint - r2).clamp(0.0, joint));
    }
    Ok(RegressionReport {
        predictors: names.to_vec(),
        n,
        joint_r2: joint,
        semi_partial_r2: semi,
        bootstrap: None,
    })
}

fn pooled_fit(
    groups: &[&Vec<&TokenRecord>],
    names: &[String],
) -> Result<RegressionReport, StatsError> {
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let mut x = DMatrix::zeros(n, PREDICTORS.len());
    let mut y = Vec::with_capacity(n);
    for (i, r) in groups.iter().flat_map(|g| g.iter()).enumerate() {
        for (j, v) in r.predictors().iter().enumerate() {
            x[(i, j)] = *v;
        }
        y.push(r.drift);
    }
    semi_partial_r2(&x, &y, names)
}

/// Drift regressed on the four token predictors, pooled over every record,
/// with percentile intervals from resampling images with replacement.
///
/// Percentile intervals of a bounded statistic can exclude the point
/// estimate; each interval is widened to contain it.
pub fn regress_records(
    records: &[TokenRecord],
    n_resamples: usize,
    alpha: f64,
    base_seed: u64,
) -> Result<RegressionReport, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidParameter(format!("alpha {alpha}")));
    }
    let names: Vec<String> = PREDICTORS.iter().map(|s| s.to_string()).collect();
    let mut by_image: std::collections::BTreeMap<u64, Vec<&TokenRecord>> = Default::default();
    for r in records {
        by_image.entry(r.image_id).or_default().push(r);
    }
    let groups: Vec<Vec<&TokenRecord>> = by_image.into_values().collect();
    let all: Vec<&Vec<&TokenRecord>> = groups.iter().collect();
    let mut report = pooled_fit(&all, &names)?;
    let draws = bootstrap_draws(
        &groups,
        |sample| {
            let fit = pooled_fit(sample, &names)?;
            let mut v = vec![fit.joint_r2];
            v.extend(fit.semi_partial_r2);
            Ok(v)
        },
        n_resamples,
        base_seed,
    )?;
    let interval = |k: usize, point: f64| {
        let col: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let (lo, hi) = percentile_interval(&col, alpha);
        (lo.min(point), hi.max(point))
    };
    let joint_r2_ci = interval(0, report.joint_r2);
    let semi_partial_r2_ci = (0..names.len())
        .map(|j| interval(j + 1, report.semi_partial_r2[j]))
        .collect();
    let mut largest_counts = vec![0; names.len()];
    for d in &draws {
        let best = (0..names.len())
            .max_by(|&a, &b| d[a + 1].total_cmp(&d[b + 1]))
            .expect("predictors");
        largest_counts[best] += 1;
    }
    report.bootstrap = Some(RegressionBootstrap {
        n_resamples,
        alpha,
        joint_r2_ci,
        semi_partial_r2_ci,
        largest_counts,
    });
    Ok(report)
}
