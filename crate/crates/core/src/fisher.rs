//! Teacher-gradient sensitivities and the diagonal empirical-Fisher surrogate.
//!
//! For a sample `x`, `R_x` is the teacher's summed negative log-likelihood over
//! supervised positions and `g_{l,p}` its gradient with respect to the
//! residual stream at alignment tap `l`, position `p`. The per-position
//! sensitivity is `s_{l,p} = ||g_{l,p}||^2 / d`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::density::WeightVector;
use crate::losses::kd_loss;
use crate::model::data::{make_batch, SynthSample};
use crate::model::{ForwardOptions, ModelError, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityField {
    /// Residual-stream indices of the rows.
    pub layers: Vec<usize>,
    /// Channel dimension.
    pub d: usize,
    /// Visual prefix length; the remaining positions are text.
    pub visual_count: usize,
    /// `||g_{l,p}||^2`, one row per layer.
    pub g_norms_sq: Array2<f64>,
    /// `g_norms_sq / d`.
    pub s: Array2<f64>,
}

impl SensitivityField {
    pub fn from_norms(
        layers: Vec<usize>,
        g_norms_sq: Array2<f64>,
        d: usize,
        visual_count: usize,
    ) -> Self {
        let s = &g_norms_sq / d as f64;
        Self {
            layers,
            d,
            visual_count,
            g_norms_sq,
            s,
        }
    }

    /// Builds the field from per-layer `T x d` gradients.
    pub fn from_gradients(layers: Vec<usize>, grads: &[Array2<f64>], visual_count: usize) -> Self {
        let t = grads.first().map_or(0, |g| g.nrows());
        let d = grads.first().map_or(0, |g| g.ncols());
        let mut norms = Array2::zeros((grads.len(), t));
        for (l, g) in grads.iter().enumerate() {
            for (p, row) in g.axis_iter(Axis(0)).enumerate() {
                norms[[l, p]] = row.dot(&row);
            }
        }
        Self::from_norms(layers, norms, d, visual_count)
    }

    pub fn seq_len(&self) -> usize {
        self.g_norms_sq.ncols()
    }

    /// `sum_l ||g_{l,p}||^2` per position.
    pub fn layer_sum(&self) -> Vec<f64> {
        self.g_norms_sq.sum_axis(Axis(0)).to_vec()
    }
}

/// Teacher NLL and its residual gradients at the alignment taps for one sample.
#[derive(Debug, Clone)]
pub struct ResidualGradients {
    pub nll: f64,
    pub grads: Vec<Array2<f64>>,
}

fn check_supervised(s: &SynthSample) -> Result<usize, ModelError> {
    match s.labels.iter().filter(|l| l.is_some()).count() {
        0 => Err(ModelError::Other(format!(
            "sample {} has no supervised positions",
            s.id
        ))),
        n => Ok(n),
    }
}

/// One teacher backward pass per batch: `R_x` and `dR_x/dr_{l,p}` at every tap.
pub fn residual_gradients(
    teacher: &ToyModel,
    samples: &[&SynthSample],
) -> Result<Vec<ResidualGradients>, ModelError> {
    let taps = teacher.config.alignment_taps()?;
    for s in samples {
        check_supervised(s)?;
    }
    // Positional embeddings reach every residual, so marking them trainable
    // makes the whole stream differentiable without touching other weights.
    let track = |n: &str| n == "embed.pos";
    let fp = teacher.forward(&make_batch(samples), &ForwardOptions::training(&track))?;
    let mut nlls = Vec::with_capacity(samples.len());
    let mut parts = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let logits = fp.logits_of(i);
        let n = check_supervised(s)? as f64;
        let (lv, terms) = kd_loss(&logits, &logits, &s.labels, 0.0, 1.0)?;
        // kd_loss averages over supervised positions; R_x is their sum
        nlls.push(terms.ce * n);
        parts.push(lv.grad.expect("gradient") * n);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let seed = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let grads = fp.tape.backward(vec![(fp.logits, seed)]);
    let seq = fp.seq;
    Ok(nlls
        .into_iter()
        .enumerate()
        .map(|(i, nll)| ResidualGradients {
            nll,
            grads: taps
                .iter()
                .map(|&t| {
                    grads
                        .get(fp.residuals[t])
                        .map(|g| g.slice(ndarray::s![i * seq..(i + 1) * seq, ..]).to_owned())
                        .unwrap_or_else(|| Array2::zeros((seq, teacher.config.d_model)))
                })
                .collect(),
        })
        .collect())
}

/// Teacher `R_x` with `delta` added to the residual stream at index `tap`.
pub fn teacher_nll(
    teacher: &ToyModel,
    sample: &SynthSample,
    delta: Option<(usize, &Array2<f64>)>,
) -> Result<f64, ModelError> {
    let n = check_supervised(sample)? as f64;
    let opts = ForwardOptions {
        residual_delta: delta,
        ..ForwardOptions::inference()
    };
    let fp = teacher.forward(&make_batch(&[sample]), &opts)?;
    let logits = fp.logits_of(0);
    let (_, terms) = kd_loss(&logits, &logits, &sample.labels, 0.0, 1.0)?;
    Ok(terms.ce * n)
}

pub fn position_sensitivity(
    teacher: &ToyModel,
    sample: &SynthSample,
) -> Result<SensitivityField, ModelError> {
    Ok(position_sensitivity_batch(teacher, std::slice::from_ref(sample))?.remove(0))
}

pub fn position_sensitivity_batch(
    teacher: &ToyModel,
    samples: &[SynthSample],
) -> Result<Vec<SensitivityField>, ModelError> {
    let taps = teacher.config.alignment_taps()?;
    let nv = teacher.config.visual_len();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        for rg in residual_gradients(teacher, &refs)? {
            out.push(SensitivityField::from_gradients(
                taps.clone(),
                &rg.grads,
                nv,
            ));
        }
    }
    Ok(out)
}

/// Weights proportional to the layer-summed squared gradient norm, rescaled to
/// sum to `t`. An all-zero field falls back to uniform weights.
pub fn grad_weight(field: &SensitivityField, t: usize) -> Result<WeightVector, ModelError> {
    if t != field.seq_len() || t == 0 {
        return Err(ModelError::Shape(format!(
            "{t} positions requested, field has {}",
            field.seq_len()
        )));
    }
    let sums = field.layer_sum();
    let total: f64 = sums.iter().sum();
    let weights = if total > 0.0 {
        sums.iter().map(|s| s * t as f64 / total).collect()
    } else {
        vec![1.0; t]
    };
    Ok(WeightVector {
        weights,
        visual_count: field.visual_count.min(t),
        text_count: t - field.visual_count.min(t),
        tau: f64::NAN,
        beta: f64::NAN,
    })
}

/// `Q_x(dr) = 1/2 * sum_{l,p} s_{l,p} * ||dr_{l,p}||^2`.
pub fn quadratic_surrogate(
    delta_r: &[Array2<f64>],
    field: &SensitivityField,
) -> Result<f64, ModelError> {
    if delta_r.len() != field.s.nrows() {
        return Err(ModelError::Shape(format!(
            "{} layers vs {}",
            delta_r.len(),
            field.s.nrows()
        )));
    }
    let mut q = 0.0;
    for (l, dr) in delta_r.iter().enumerate() {
        if dr.nrows() != field.seq_len() || dr.ncols() != field.d {
            return Err(ModelError::Shape(format!(
                "layer {l}: {:?} vs ({}, {})",
                dr.dim(),
                field.seq_len(),
                field.d
            )));
        }
        for (p, row) in dr.axis_iter(Axis(0)).enumerate() {
            q += field.s[[l, p]] * row.dot(&row);
        }
    }
    Ok(0.5 * q)
}
