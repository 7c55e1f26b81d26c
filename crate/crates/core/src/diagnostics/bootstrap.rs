//! Percentile bootstrap over groups (images) resampled with replacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::StatsError;

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(alpha/2, 1 - alpha/2)` percentile interval of unsorted draws.
pub fn percentile_interval(draws: &[f64], alpha: f64) -> (f64, f64) {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    (
        percentile(&v, alpha / 2.0),
        percentile(&v, 1.0 - alpha / 2.0),
    )
}

fn check(n_groups: usize, n_resamples: usize) -> Result<(), StatsError> {
    if n_groups < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: n_groups,
        });
    }
    if n_resamples < 100 {
        return Err(StatsError::InvalidParameter(format!(
            "n_resamples must be at least 100, got {n_resamples}"
        )));
    }
    Ok(())
}

/// Evaluates a vector-valued `statistic` on `n_resamples` resamples of
/// `groups`. Resample `i` draws from a generator seeded with `base_seed + i`,
/// so the output does not depend on thread scheduling. Independent analyses
/// should use base seeds at least `n_resamples` apart.
pub fn bootstrap_draws<G, F>(
    groups: &[G],
    statistic: F,
    n_resamples: usize,
    base_seed: u64,
) -> Result<Vec<Vec<f64>>, StatsError>
where
    G: Sync,
    F: Fn(&[&G]) -> Result<Vec<f64>, StatsError> + Sync,
{
    check(groups.len(), n_resamples)?;
    (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(i as u64));
            let sample: Vec<&G> = (0..groups.len())
                .map(|_| &groups[rng.random_range(0..groups.len())])
                .collect();
            statistic(&sample).map_err(|e| StatsError::Resample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Percentile confidence interval of a scalar statistic.
pub fn bootstrap_ci<G, F>(
    groups: &[G],
    statistic: F,
    n_resamples: usize,
    alpha: f64,
    base_seed: u64,
) -> Result<(f64, f64), StatsError>
where
    G: Sync,
    F: Fn(&[&G]) -> Result<f64, StatsError> + Sync,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidParameter(format!("alpha {alpha}")));
    }
    let draws = bootstrap_draws(
        groups,
        |s| statistic(s).map(|v| vec![v]),
        n_resamples,
        base_seed,
    )?;
    let flat: Vec<f64> = draws.into_iter().map(|v| v[0]).collect();
    Ok(percentile_interval(&flat, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn mean_of(groups: &[&f64]) -> Result<f64, StatsError> {
        Ok(groups.iter().copied().sum::<f64>() / groups.len() as f64)
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&v, 0.5), 2.5);
        assert!((percentile(&v, 0.25) - 1.75).abs() < 1e-15);
        assert_eq!(percentile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn constant_statistic_gives_zero_width() {
        let groups = vec![3.0; 10];
        let (lo, hi) = bootstrap_ci(&groups, mean_of, 200, 0.05, 1).unwrap();
        assert_eq!((lo, hi), (3.0, 3.0));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let groups: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let a = bootstrap_ci(&groups, mean_of, 300, 0.05, 42).unwrap();
        let b = bootstrap_ci(&groups, mean_of, 300, 0.05, 42).unwrap();
        assert_eq!(a, b);
        // seeds closer than n_resamples share most resamples
        let c = bootstrap_ci(&groups, mean_of, 300, 0.05, 42 + 300).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn errors_propagate_with_index() {
        let groups: Vec<f64> = (0..5).map(f64::from).collect();
        let err = bootstrap_ci(
            &groups,
            |s| {
                if s.iter().all(|v| **v == *s[0]) {
                    Err(StatsError::ConstantTarget)
                } else {
                    Ok(0.0)
                }
            },
            5000,
            0.05,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, StatsError::Resample { .. }), "{err}");
        assert!(bootstrap_ci(&[1.0], mean_of, 100, 0.05, 0).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], mean_of, 99, 0.05, 0).is_err());
    }

    #[test]
    fn coverage_of_normal_mean() {
        let normal = Normal::new(2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut covered = 0;
        for trial in 0..100 {
            let groups: Vec<f64> = (0..60).map(|_| normal.sample(&mut rng)).collect();
            let (lo, hi) = bootstrap_ci(&groups, mean_of, 400, 0.05, trial * 1000).unwrap();
            if lo <= 2.0 && 2.0 <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 90, "covered {covered}/100");
    }

    #[test]
    fn width_shrinks_with_more_groups() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let median_width = |n: usize, rng: &mut ChaCha8Rng| {
            let mut widths: Vec<f64> = (0..15)
                .map(|t| {
                    let groups: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
                    let (lo, hi) = bootstrap_ci(&groups, mean_of, 200, 0.05, t).unwrap();
                    hi - lo
                })
                .collect();
            widths.sort_by(f64::total_cmp);
            widths[widths.len() / 2]
        };
        let small = median_width(50, &mut rng);
        let large = median_width(200, &mut rng);
        assert!(large < small, "{large} >= {small}");
    }
}
