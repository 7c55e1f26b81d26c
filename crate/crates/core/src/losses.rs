//! Alignment and distillation losses with analytic gradients.
//!
//! Every loss returns its value and the gradient with respect to the student
//! argument. Residual losses are normalized by `|layers| * T`.

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityMap, WeightVector};

/// Default weight of the KL term of the end-to-end objective.
pub const DEFAULT_LAMBDA_KL: f64 = 1.0;
/// Default weight of the cross-entropy term of the end-to-end objective.
pub const DEFAULT_LAMBDA_CE: f64 = 0.1;
/// Weight given to selected positions in the masking control.
pub const DEFAULT_MASK_BOOST: f64 = 5.0;
/// Mask sizes, in percent of positions, swept by the masking control.
pub const CONTROL_K_PERCENT: [f64; 4] = [0.0, 10.0, 25.0, 50.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight vector has length {got}, sequence has {expected} positions")]
    WeightLength { expected: usize, got: usize },
    #[error("weight at position {position} is not positive ({value})")]
    NonPositiveWeight { position: usize, value: f64 },
    #[error("empty loss support: every position is ignore-marked")]
    EmptySupport,
    #[error("label {label} at position {position} is outside the vocabulary of {vocab}")]
    BadLabel {
        position: usize,
        label: usize,
        vocab: usize,
    },
    #[error("invalid mask percentage {0}")]
    InvalidPercent(f64),
    #[error("mask boost must be positive, got {0}")]
    InvalidBoost(f64),
}

/// Residual-stream snapshots at the alignment layers, plus final logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    /// Residual-stream indices of the snapshots, in order.
    pub layers: Vec<usize>,
    /// One `T x d` array per entry of `layers`.
    pub residuals: Vec<Array2<f64>>,
    /// `T x V` scores from the output head.
    pub logits: Array2<f64>,
}

impl ResidualTrace {
    pub fn seq_len(&self) -> usize {
        self.residuals.first().map_or(0, |r| r.nrows())
    }

    pub fn channels(&self) -> usize {
        self.residuals.first().map_or(0, |r| r.ncols())
    }
}

/// A scalar loss and the gradient with respect to its student argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: Option<G>,
}

fn check_pair(
    student: &[Array2<f64>],
    teacher: &[Array2<f64>],
) -> Result<(usize, usize), LossError> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    let shape = student[0].dim();
    for (l, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.dim() != shape || t.dim() != shape {
            return Err(LossError::ShapeMismatch(format!(
                "layer {l}: student {:?}, teacher {:?}, expected {:?}",
                s.dim(),
                t.dim(),
                shape
            )));
        }
    }
    Ok((student.len(), shape.0))
}

/// `1/(L*T) * sum_l sum_p w_p * ||s_lp - t_lp||^2`, uniform when `weights` is `None`.
fn weighted_mse(
    student: &[Array2<f64>],
    teacher: &[Array2<f64>],
    weights: Option<&[f64]>,
) -> Result<LossValue<Vec<Array2<f64>>>, LossError> {
    let (layers, seq) = check_pair(student, teacher)?;
    if let Some(w) = weights {
        if w.len() != seq {
            return Err(LossError::WeightLength {
                expected: seq,
                got: w.len(),
            });
        }
    }
    let norm = 1.0 / (layers * seq) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(layers);
    for (s, t) in student.iter().zip(teacher) {
        let diff = s - t;
        let mut g = Array2::zeros(diff.dim());
        for (p, (drow, mut grow)) in diff.outer_iter().zip(g.outer_iter_mut()).enumerate() {
            let w = weights.map_or(1.0, |w| w[p]);
            let sq: f64 = drow.iter().map(|x| x * x).sum();
            value += w * sq;
            grow.zip_mut_with(&drow, |gv, &dv| *gv = 2.0 * norm * w * dv);
        }
        grads.push(g);
    }
    Ok(LossValue {
        value: value * norm,
        grad: Some(grads),
    })
}

/// Uniform residual-stream alignment.
pub fn rsa_loss(
    student: &ResidualTrace,
    teacher: &ResidualTrace,
) -> Result<LossValue<Vec<Array2<f64>>>, LossError> {
    weighted_mse(&student.residuals, &teacher.residuals, None)
}

/// Residual-stream alignment with one weight per position shared by all layers.
pub fn heed_loss(
    student: &ResidualTrace,
    teacher: &ResidualTrace,
    w: &WeightVector,
) -> Result<LossValue<Vec<Array2<f64>>>, LossError> {
    check_weights(&w.weights)?;
    weighted_mse(&student.residuals, &teacher.residuals, Some(&w.weights))
}

/// Residual-stream alignment with arbitrary non-negative per-position weights,
/// e.g. gradient-derived weights that vanish where the teacher loss is insensitive.
pub fn weighted_residual_loss(
    student: &ResidualTrace,
    teacher: &ResidualTrace,
    weights: &[f64],
) -> Result<LossValue<Vec<Array2<f64>>>, LossError> {
    if let Some(position) = weights.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(LossError::NonPositiveWeight {
            position,
            value: weights[position],
        });
    }
    weighted_mse(&student.residuals, &teacher.residuals, Some(weights))
}

fn check_weights(w: &[f64]) -> Result<(), LossError> {
    match w.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
        Some(position) => Err(LossError::NonPositiveWeight {
            position,
            value: w[position],
        }),
        None => Ok(()),
    }
}

/// Block-output matching between student mixers and teacher attention at the
/// replaced layers, normalized like [`rsa_loss`].
pub fn hsa_loss(
    student_outputs: &[Array2<f64>],
    teacher_outputs: &[Array2<f64>],
) -> Result<LossValue<Vec<Array2<f64>>>, LossError> {
    weighted_mse(student_outputs, teacher_outputs, None)
}

fn log_softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Breakdown of the end-to-end objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KdTerms {
    pub kl: f64,
    pub ce: f64,
}

/// `lambda_kl * KL(teacher || student) + lambda_ce * CE(student, labels)`,
/// both averaged over positions whose label is not ignore-marked (`None`).
pub fn kd_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    labels: &[Option<usize>],
    lambda_kl: f64,
    lambda_ce: f64,
) -> Result<(LossValue<Array2<f64>>, KdTerms), LossError> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "student logits {:?}, teacher logits {:?}",
            student_logits.dim(),
            teacher_logits.dim()
        )));
    }
    let (seq, vocab) = student_logits.dim();
    if labels.len() != seq {
        return Err(LossError::ShapeMismatch(format!(
            "{} labels for {} positions",
            labels.len(),
            seq
        )));
    }
    let support: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(p, l)| l.map(|l| (p, l)))
        .collect();
    if support.is_empty() {
        return Err(LossError::EmptySupport);
    }
    if let Some(&(position, label)) = support.iter().find(|(_, l)| *l >= vocab) {
        return Err(LossError::BadLabel {
            position,
            label,
            vocab,
        });
    }

    let n = support.len() as f64;
    let mut terms = KdTerms::default();
    let mut grad = Array2::zeros((seq, vocab));
    for &(p, label) in &support {
        let ls = log_softmax(student_logits.row(p));
        let lt = log_softmax(teacher_logits.row(p));
        let mut kl = 0.0;
        for v in 0..vocab {
            let pt = lt[v].exp();
            if pt > 0.0 {
                kl += pt * (lt[v] - ls[v]);
            }
            let ps = ls[v].exp();
            let onehot = if v == label { 1.0 } else { 0.0 };
            grad[[p, v]] = (lambda_kl * (ps - pt) + lambda_ce * (ps - onehot)) / n;
        }
        terms.kl += kl.max(0.0);
        terms.ce -= ls[label];
    }
    terms.kl /= n;
    terms.ce /= n;
    Ok((
        LossValue {
            value: lambda_kl * terms.kl + lambda_ce * terms.ce,
            grad: Some(grad),
        },
        terms,
    ))
}

/// How the masking control picks its boosted positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "seed")]
pub enum MaskMode {
    /// Highest raw density first, ties broken by lower position index.
    Density,
    /// Uniform without replacement from the given seed.
    Random(u64),
}

/// Number of positions selected for a `k_percent` mask over `n` positions.
pub fn mask_cardinality(k_percent: f64, n: usize) -> usize {
    let exact = k_percent * n as f64 / 100.0;
    // Guard against 25% of 36 landing at 9.000000000000002.
    let m = (exact - 1e-9).ceil().max(0.0) as usize;
    m.min(n)
}

/// Binary-mask weights over the visual positions of `map`: `boost` on the
/// selected positions, one elsewhere, with no renormalization.
pub fn topk_mask_weights(
    map: &DensityMap,
    k_percent: f64,
    boost: f64,
    mode: MaskMode,
) -> Result<WeightVector, LossError> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(LossError::InvalidPercent(k_percent));
    }
    if !(boost > 0.0) || !boost.is_finite() {
        return Err(LossError::InvalidBoost(boost));
    }
    let n = map.len();
    let m = mask_cardinality(k_percent, n);
    let selected: Vec<usize> = match mode {
        MaskMode::Density => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| map.rho[b].total_cmp(&map.rho[a]).then(a.cmp(&b)));
            order.truncate(m);
            order
        }
        MaskMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n, m).into_vec()
        }
    };
    let mut weights = vec![1.0; n];
    for p in selected {
        weights[p] = boost;
    }
    Ok(WeightVector {
        weights,
        visual_count: n,
        text_count: 0,
        tau: f64::NAN,
        beta: f64::NAN,
    })
}

/// Squared error per position, summed over layers: `sum_l ||s_lp - t_lp||^2`.
pub fn per_position_sq_error(student: &[Array2<f64>], teacher: &[Array2<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; student.first().map_or(0, |s| s.nrows())];
    for (s, t) in student.iter().zip(teacher) {
        let diff = s - t;
        for (acc, row) in out.iter_mut().zip(diff.axis_iter(Axis(0))) {
            *acc += row.iter().map(|x| x * x).sum::<f64>();
        }
    }
    out
}
