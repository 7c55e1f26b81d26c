//! Training-free per-position density and the alignment weights derived from it.
//!
//! A patch is dense when its feature points away from the features of its
//! 3x3 neighbourhood. Densities are min-max normalized per image and mapped
//! through a temperature-controlled exponential to weights whose sum equals
//! the aligned sequence length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default temperature of the exponential weight map.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default multiplier applied to the mean visual density for text positions.
pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("empty patch grid")]
    EmptyGrid,
    #[error("feature dimension must be at least 1")]
    ZeroDim,
    #[error("expected {expected} feature values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite feature value at patch {patch}")]
    NonFinite { patch: usize },
    #[error("undefined cosine: patch {patch} has a zero-norm feature")]
    UndefinedCosine { patch: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTau(f64),
    #[error("text boost must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("density map is empty")]
    EmptyMap,
}

/// Patch features laid out row-major as `height * width * dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    dim: usize,
    features: Vec<f64>,
}

impl PatchGrid {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        features: Vec<f64>,
    ) -> Result<Self, DensityError> {
        if height == 0 || width == 0 {
            return Err(DensityError::EmptyGrid);
        }
        if dim == 0 {
            return Err(DensityError::ZeroDim);
        }
        let expected = height * width * dim;
        if features.len() != expected {
            return Err(DensityError::ShapeMismatch {
                expected,
                got: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite { patch: i / dim });
        }
        Ok(Self {
            height,
            width,
            dim,
            features,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Feature vector of the patch at row `i`, column `j`.
    pub fn feature(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.dim;
        &self.features[start..start + self.dim]
    }

    /// Patch features in raster order.
    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    /// Grid mirrored left to right.
    pub fn flip_horizontal(&self) -> Self {
        self.remap(|i, j| (i, self.width - 1 - j))
    }

    /// Grid mirrored top to bottom.
    pub fn flip_vertical(&self) -> Self {
        self.remap(|i, j| (self.height - 1 - i, j))
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut features = Vec::with_capacity(self.features.len());
        for i in 0..self.height {
            for j in 0..self.width {
                let (si, sj) = src(i, j);
                features.extend_from_slice(self.feature(si, sj));
            }
        }
        Self {
            features,
            ..self.clone()
        }
    }
}

/// Per-patch density of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub rho: Vec<f64>,
    pub rho_tilde: Vec<f64>,
    pub degenerate: bool,
}

impl DensityMap {
    /// Builds a map from raw densities and normalizes it.
    pub fn from_rho(rho: Vec<f64>) -> Result<Self, DensityError> {
        if rho.is_empty() {
            return Err(DensityError::EmptyMap);
        }
        Ok(normalize_density(Self {
            rho,
            rho_tilde: Vec::new(),
            degenerate: false,
        }))
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn mean_rho(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }
}

/// Per-position alignment weights of one aligned sequence.
///
/// Visual positions come first, followed by `text_count` text positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub visual_count: usize,
    pub text_count: usize,
    pub tau: f64,
    pub beta: f64,
}

impl WeightVector {
    /// All-ones weights, the uniform allocation of residual alignment.
    pub fn uniform(visual_count: usize, text_count: usize) -> Self {
        Self {
            weights: vec![1.0; visual_count + text_count],
            visual_count,
            text_count,
            tau: f64::INFINITY,
            beta: 0.0,
        }
    }

    /// Aligned sequence length.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Appends `text_count` positions with weight one.
    pub fn with_unit_text(mut self, text_count: usize) -> Self {
        self.weights.extend(std::iter::repeat_n(1.0, text_count));
        self.text_count += text_count;
        self
    }
}

fn reflect(x: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if x < 0 {
        -x
    } else if x >= n {
        2 * (n - 1) - x
    } else {
        x
    };
    r as usize
}

/// Offsets of the eight neighbours in the 3x3 window, centre excluded.
const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Local self-dissimilarity: one minus the mean cosine similarity between each
/// patch and its eight reflected-padding neighbours.
///
/// Only `rho` is filled; call [`normalize_density`] for `rho_tilde`.
pub fn patch_density(grid: &PatchGrid) -> Result<DensityMap, DensityError> {
    let norms: Vec<f64> = grid
        .patches()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(patch) = norms.iter().position(|&n| n == 0.0) {
        return Err(DensityError::UndefinedCosine { patch });
    }

    let (h, w) = (grid.height, grid.width);
    let mut rho = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let vp = grid.feature(i, j);
            let np = norms[i * w + j];
            let mut cos_sum = 0.0;
            for (di, dj) in NEIGHBOURS {
                let qi = reflect(i as isize + di, h);
                let qj = reflect(j as isize + dj, w);
                let vq = grid.feature(qi, qj);
                let dot: f64 = vp.iter().zip(vq).map(|(a, b)| a * b).sum();
                cos_sum += dot / (np * norms[qi * w + qj]);
            }
            let r = 1.0 - cos_sum / NEIGHBOURS.len() as f64;
            rho.push(r.clamp(0.0, 2.0));
        }
    }
    Ok(DensityMap {
        rho,
        rho_tilde: Vec::new(),
        degenerate: false,
    })
}

/// Per-image min-max normalization of `rho` into `rho_tilde`.
///
/// A constant map is flagged degenerate and normalizes to all zeros.
pub fn normalize_density(mut map: DensityMap) -> DensityMap {
    let (lo, hi) = min_max(&map.rho);
    if hi > lo {
        let span = hi - lo;
        map.rho_tilde = map
            .rho
            .iter()
            .map(|r| ((r - lo) / span).clamp(0.0, 1.0))
            .collect();
        map.degenerate = false;
    } else {
        map.rho_tilde = vec![0.0; map.rho.len()];
        map.degenerate = true;
    }
    map
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Normalized density of the visual positions followed by `text_count` text
/// positions at `beta` times the mean visual density, min-max normalized
/// jointly. A degenerate visual map gives all zeros.
pub fn joint_density(map: &DensityMap, text_count: usize, beta: f64) -> Vec<f64> {
    if map.degenerate {
        return vec![0.0; map.len() + text_count];
    }
    let mut joint = map.rho.clone();
    joint.extend(std::iter::repeat_n(beta * map.mean_rho(), text_count));
    normalize_density(DensityMap {
        rho: joint,
        rho_tilde: Vec::new(),
        degenerate: false,
    })
    .rho_tilde
}

/// Alignment weights for an image followed by `text_count` text positions.
///
/// Text positions receive density `beta` times the mean visual density and
/// are normalized jointly with the visual positions. Weights are
/// `exp(rho_tilde / tau)` rescaled so that they sum to the sequence length.
/// A degenerate visual map yields uniform weights.
pub fn sequence_weights(
    map: &DensityMap,
    text_count: usize,
    tau: f64,
    beta: f64,
) -> Result<WeightVector, DensityError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(DensityError::InvalidTau(tau));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(DensityError::InvalidBeta(beta));
    }
    if map.is_empty() {
        return Err(DensityError::EmptyMap);
    }
    let visual_count = map.len();
    let total = visual_count + text_count;

    if map.degenerate {
        return Ok(WeightVector {
            weights: vec![1.0; total],
            visual_count,
            text_count,
            tau,
            beta,
        });
    }

    let joint = joint_density(map, text_count, beta);

    // exp((r - 1) / tau) differs from exp(r / tau) by a constant factor that the
    // rescale removes, and cannot overflow for r in [0, 1].
    let cap = 1.0 / tau;
    let mut weights: Vec<f64> = joint
        .iter()
        .map(|r| ((r / tau).min(cap) - cap).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    let scale = total as f64 / sum;
    for w in &mut weights {
        *w *= scale;
    }
    Ok(WeightVector {
        weights,
        visual_count,
        text_count,
        tau,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_from(h: usize, w: usize, feats: &[&[f64]]) -> PatchGrid {
        let dim = feats[0].len();
        PatchGrid::new(h, w, dim, feats.concat()).unwrap()
    }

    /// Brute-force density: enumerate the padded 3x3 window explicitly.
    fn oracle_density(grid: &PatchGrid) -> Vec<f64> {
        let (h, w) = (grid.height() as isize, grid.width() as isize);
        let refl = |x: isize, n: isize| -> isize {
            if n == 1 {
                0
            } else if x < 0 {
                -x
            } else if x >= n {
                2 * n - 2 - x
            } else {
                x
            }
        };
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                let mut n = 0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let qi = refl(i + di, h) as usize;
                        let qj = refl(j + dj, w) as usize;
                        acc += cos(grid.feature(i as usize, j as usize), grid.feature(qi, qj));
                        n += 1;
                    }
                }
                out.push(1.0 - acc / n as f64);
            }
        }
        out
    }

    #[test]
    fn shared_feature_has_zero_density() {
        let v: &[f64] = &[0.3, -1.2, 2.0];
        let grid = grid_from(3, 4, &[v; 12]);
        let map = patch_density(&grid).unwrap();
        assert!(map.rho.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn single_patch_reflects_onto_itself() {
        let grid = grid_from(1, 1, &[&[0.5, 0.1]]);
        let map = patch_density(&grid).unwrap();
        assert!(map.rho[0].abs() < 1e-12);
    }

    #[test]
    fn two_by_two_orthonormal_matches_oracle() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let grid = grid_from(2, 2, &[&e1, &e1, &e1, &e2]);
        let map = patch_density(&grid).unwrap();
        let expected = oracle_density(&grid);
        // Frozen from the oracle: in a 2x2 grid every patch sees each other
        // patch in its reflected window, e2's patch only sees e1 neighbours.
        assert_eq!(expected.len(), 4);
        assert!((expected[3] - 1.0).abs() < 1e-15);
        for (a, b) in map.rho.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_norm_feature_is_rejected() {
        let grid = grid_from(1, 2, &[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(
            patch_density(&grid),
            Err(DensityError::UndefinedCosine { patch: 1 })
        );
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert_eq!(
            PatchGrid::new(0, 3, 2, vec![]),
            Err(DensityError::EmptyGrid)
        );
    }

    #[test]
    fn normalization_examples() {
        let m = DensityMap::from_rho(vec![0.2, 0.2, 0.2]).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.rho_tilde, vec![0.0; 3]);

        let m = DensityMap::from_rho(vec![0.0, 0.5, 1.0]).unwrap();
        assert!(!m.degenerate);
        assert_eq!(m.rho_tilde, vec![0.0, 0.5, 1.0]);

        let m = DensityMap::from_rho(vec![0.1, 0.4]).unwrap();
        assert_eq!(m.rho_tilde, vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_map_gives_uniform_weights() {
        let m = DensityMap::from_rho(vec![0.3; 5]).unwrap();
        let w = sequence_weights(&m, 4, DEFAULT_TAU, DEFAULT_BETA).unwrap();
        assert_eq!(w.len(), 9);
        assert!(w.weights.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn closed_form_four_positions() {
        let m = DensityMap::from_rho(vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let w = sequence_weights(&m, 0, 0.5, DEFAULT_BETA).unwrap();
        // Oracle: w_i = 4 e^{2 r_i} / sum_j e^{2 r_j}, evaluated independently.
        let raw: Vec<f64> = [0.0f64, 2.0 / 3.0, 4.0 / 3.0, 2.0]
            .iter()
            .map(|x| x.exp())
            .collect();
        let s: f64 = raw.iter().sum();
        for (got, r) in w.weights.iter().zip(&raw) {
            let want = 4.0 * r / s;
            assert!((got - want).abs() < 1e-13, "{got} vs {want}");
        }
        // Frozen values (mpmath, 30 digits).
        let frozen = [
            0.283_076_457_266_010_964,
            0.551_357_652_038_168_795,
            1.073_898_067_670_720_346,
            2.091_667_823_025_099_894,
        ];
        for (got, want) in w.weights.iter().zip(frozen) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn text_positions_sit_above_visual_mean() {
        let m = DensityMap::from_rho(vec![0.0, 0.1, 0.2, 1.0]).unwrap();
        let w = sequence_weights(&m, 2, DEFAULT_TAU, DEFAULT_BETA).unwrap();
        let mean_visual_w = w.weights[..4].iter().sum::<f64>() / 4.0;
        assert!(w.weights[4] > w.weights[2]);
        assert!(w.weights[4] < w.weights[3]);
        assert_eq!(w.weights[4], w.weights[5]);
        assert!((w.sum() - 6.0).abs() < 1e-12);
        assert!(mean_visual_w > 0.0);
    }

    #[test]
    fn invalid_parameters() {
        let m = DensityMap::from_rho(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            sequence_weights(&m, 0, 0.0, 2.0),
            Err(DensityError::InvalidTau(_))
        ));
        assert!(matches!(
            sequence_weights(&m, 0, -1.0, 2.0),
            Err(DensityError::InvalidTau(_))
        ));
        assert!(matches!(
            sequence_weights(&m, 0, 0.5, 0.0),
            Err(DensityError::InvalidBeta(_))
        ));
    }

    fn arb_grid() -> impl Strategy<Value = PatchGrid> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, d)| {
            prop::collection::vec(prop_oneof![-3.0f64..-0.05, 0.05f64..3.0], h * w * d)
                .prop_map(move |f| PatchGrid::new(h, w, d, f).unwrap())
        })
    }

    fn arb_rho() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..2.0, 1..40)
    }

    proptest! {
        #[test]
        fn density_matches_oracle(grid in arb_grid()) {
            let map = patch_density(&grid).unwrap();
            for (a, b) in map.rho.iter().zip(oracle_density(&grid)) {
                prop_assert!((a - b.clamp(0.0, 2.0)).abs() < 1e-12);
            }
        }

        #[test]
        fn density_is_scale_invariant(grid in arb_grid(), c in 0.01f64..100.0) {
            let scaled = PatchGrid::new(
                grid.height(), grid.width(), grid.dim(),
                grid.features().iter().map(|v| v * c).collect(),
            ).unwrap();
            let a = patch_density(&grid).unwrap();
            let b = patch_density(&scaled).unwrap();
            for (x, y) in a.rho.iter().zip(&b.rho) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn density_is_flip_equivariant(grid in arb_grid()) {
            let base = patch_density(&grid).unwrap();
            let (h, w) = (grid.height(), grid.width());
            let hf = patch_density(&grid.flip_horizontal()).unwrap();
            let vf = patch_density(&grid.flip_vertical()).unwrap();
            for i in 0..h {
                for j in 0..w {
                    let b = base.rho[i * w + j];
                    prop_assert!((hf.rho[i * w + (w - 1 - j)] - b).abs() < 1e-12);
                    prop_assert!((vf.rho[(h - 1 - i) * w + j] - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn weights_sum_to_length(rho in arb_rho(), text in 0usize..12, tau in 0.05f64..5.0) {
            let m = DensityMap::from_rho(rho).unwrap();
            let w = sequence_weights(&m, text, tau, DEFAULT_BETA).unwrap();
            let t = w.len() as f64;
            prop_assert!((w.sum() - t).abs() <= 1e-9 * t);
            prop_assert!(w.weights.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn weights_are_monotone_in_density(rho in arb_rho(), text in 0usize..6) {
            let m = DensityMap::from_rho(rho).unwrap();
            let w = sequence_weights(&m, text, DEFAULT_TAU, DEFAULT_BETA).unwrap();
            for a in 0..m.len() {
                for b in 0..m.len() {
                    if m.rho_tilde[a] >= m.rho_tilde[b] {
                        prop_assert!(w.weights[a] >= w.weights[b]);
                    }
                }
            }
        }

        #[test]
        fn lower_tau_sharpens_weights(rho in arb_rho(), tau in 0.1f64..3.0) {
            let m = DensityMap::from_rho(rho).unwrap();
            prop_assume!(!m.degenerate);
            let spread = |t: f64| {
                let w = sequence_weights(&m, 0, t, DEFAULT_BETA).unwrap();
                let (lo, hi) = min_max(&w.weights);
                hi / lo
            };
            prop_assert!(spread(tau * 0.8) > spread(tau));
        }
    }
}
