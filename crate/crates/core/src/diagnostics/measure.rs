//! Token-level measurements on a teacher/student pair.

use ndarray::Axis;

use super::{residual_drift, TokenRecord, TokenType};
use crate::density::joint_density;
use crate::model::data::{make_batch, SynthSample};
use crate::model::train::sample_density;
use crate::model::{ForwardOptions, ModelError, ToyModel};

/// Mean log-probability the model assigns to the gold tokens at supervised
/// positions, with `key_mask[j] == false` hiding position `j` from attention.
pub fn answer_score(
    model: &ToyModel,
    sample: &SynthSample,
    key_mask: Option<&[bool]>,
) -> Result<f64, ModelError> {
    let opts = ForwardOptions {
        key_mask,
        ..ForwardOptions::inference()
    };
    let fp = model.forward(&make_batch(&[sample]), &opts)?;
    let logits = fp.logits_of(0);
    let (mut total, mut n) = (0.0, 0usize);
    for (p, label) in sample.labels.iter().enumerate() {
        let Some(y) = label else { continue };
        let row = logits.index_axis(Axis(0), p);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        total += row[*y] - lse;
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::Other(format!(
            "sample {} has no supervised positions",
            sample.id
        )));
    }
    Ok(total / n as f64)
}

/// Drop in answer score when `masked` positions are hidden from every
/// attention layer's keys and values.
pub fn mask_importance(
    model: &ToyModel,
    sample: &SynthSample,
    masked: &[usize],
) -> Result<f64, ModelError> {
    let seq = sample.seq_len();
    if let Some(&p) = masked.iter().find(|&&p| p >= seq) {
        return Err(ModelError::Shape(format!(
            "masked position {p} outside sequence of {seq}"
        )));
    }
    if masked.is_empty() {
        return Ok(0.0);
    }
    let mut visible = vec![true; seq];
    for &p in masked {
        visible[p] = false;
    }
    if visible.iter().all(|v| !v) {
        return Err(ModelError::Other("cannot mask every position".into()));
    }
    Ok(answer_score(model, sample, None)? - answer_score(model, sample, Some(&visible))?)
}

/// Mean attention mass each key position receives, averaged over heads,
/// attention layers and the query positions that can see it.
pub fn attention_received(model: &ToyModel, sample: &SynthSample) -> Result<Vec<f64>, ModelError> {
    let fp = model.forward(&make_batch(&[sample]), &ForwardOptions::inference())?;
    let seq = fp.seq;
    let heads = model.config.n_heads;
    let mut out = vec![0.0; seq];
    let mut layers = 0;
    for var in fp.attention.iter().flatten() {
        let probs = fp.tape.attention_probs(*var).expect("attention node");
        layers += 1;
        for h in 0..heads {
            for j in 0..seq {
                let mass: f64 = (j..seq).map(|i| probs[(h * seq + i) * seq + j]).sum();
                out[j] += mass / (seq - j) as f64;
            }
        }
    }
    if layers == 0 {
        return Err(ModelError::Other("model has no attention layers".into()));
    }
    let norm = (layers * heads) as f64;
    Ok(out.into_iter().map(|m| m / norm).collect())
}

/// One record per (sample, alignment tap, position).
pub fn token_records(
    teacher: &ToyModel,
    student: &ToyModel,
    samples: &[SynthSample],
    beta: f64,
    with_mask_importance: bool,
) -> Result<Vec<TokenRecord>, ModelError> {
    let cfg = &teacher.config;
    let taps = cfg.alignment_taps()?;
    let max_tap = *taps.iter().max().expect("taps") as f64;
    let nv = cfg.visual_len();
    let mut out = Vec::new();
    for s in samples {
        let st = student.forward_with_residuals(s)?;
        let tt = teacher.forward_with_residuals(s)?;
        let drift = residual_drift(&st, &tt).map_err(|e| ModelError::Shape(e.to_string()))?;
        let density = joint_density(&sample_density(s, None)?, s.tokens.len(), beta);
        let attention = attention_received(teacher, s)?;
        let importance = if with_mask_importance {
            let base = answer_score(teacher, s, None)?;
            let mut a = Vec::with_capacity(s.seq_len());
            for p in 0..s.seq_len() {
                let mut visible = vec![true; s.seq_len()];
                visible[p] = false;
                a.push(Some(base - answer_score(teacher, s, Some(&visible))?));
            }
            a
        } else {
            vec![None; s.seq_len()]
        };
        for (k, &tap) in taps.iter().enumerate() {
            for p in 0..s.seq_len() {
                out.push(TokenRecord {
                    image_id: s.id,
                    position: p,
                    layer: tap,
                    layer_depth: tap as f64 / max_tap,
                    token_type: if p < nv {
                        TokenType::Visual
                    } else {
                        TokenType::Text
                    },
                    density: density[p],
                    teacher_attention: attention[p],
                    drift: drift[[k, p]],
                    mask_importance: importance[p],
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{synth_task, Task};
    use crate::model::ToyConfig;

    fn tiny() -> (ToyModel, Vec<SynthSample>) {
        let cfg = ToyConfig {
            d_model: 8,
            n_heads: 2,
            grid_height: 4,
            grid_width: 4,
            patch_dim: 4,
            text_len: 6,
            mlp_hidden: 8,
            n_glyphs: 1,
            seed: 5,
            ..ToyConfig::default()
        };
        let t = ToyModel::teacher(&cfg).unwrap();
        (t, synth_task(&cfg, 4, 2, Task::Dense))
    }

    #[test]
    fn trivial_masks() {
        let (t, data) = tiny();
        let s = &data[0];
        assert_eq!(mask_importance(&t, s, &[]).unwrap(), 0.0);
        // the last position is read by no supervised query
        let last = s.seq_len() - 1;
        assert_eq!(mask_importance(&t, s, &[last]).unwrap(), 0.0);
        let all: Vec<usize> = (0..s.seq_len()).collect();
        assert!(mask_importance(&t, s, &all).is_err());
        assert!(mask_importance(&t, s, &[s.seq_len()]).is_err());
    }

    #[test]
    fn attention_mass_is_a_distribution_over_keys() {
        let (t, data) = tiny();
        let s = &data[1];
        let a = attention_received(&t, s).unwrap();
        assert_eq!(a.len(), s.seq_len());
        assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // the first key is the only one visible to the first query
        assert!(a[0] > 0.0);
    }

    #[test]
    fn records_cover_every_tap_and_position() {
        let (t, data) = tiny();
        let student = ToyModel::hybridize(&t, 1).unwrap();
        let recs = token_records(&t, &student, &data[..2], 2.0, true).unwrap();
        let seq = t.config.seq_len();
        assert_eq!(recs.len(), 2 * 3 * seq);
        for r in &recs {
            assert!(r.drift >= 0.0);
            assert!((0.0..=1.0).contains(&r.density));
            assert!((0.0..=1.0).contains(&r.layer_depth));
            assert!(r.mask_importance.is_some());
        }
        let same = token_records(&t, &t, &data[..1], 2.0, false).unwrap();
        assert!(same
            .iter()
            .all(|r| r.drift == 0.0 && r.mask_importance.is_none()));
    }
}
