//! Teacher training, evaluation and three-stage distillation.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{exact_match, make_batch, synth_dataset, SynthSample, Task};
use super::{
    derived_rng, is_mixer_param, mixer_new_param_names, Batch, ForwardOptions, ForwardPass,
    ModelError, ToyConfig, ToyModel,
};
use crate::cache::DensityCache;
use crate::density::{
    patch_density, sequence_weights, DensityMap, WeightVector, DEFAULT_BETA, DEFAULT_TAU,
};
use crate::fisher;
use crate::losses::{
    heed_loss, hsa_loss, kd_loss, rsa_loss, topk_mask_weights, weighted_residual_loss, MaskMode,
    ResidualTrace, DEFAULT_LAMBDA_CE, DEFAULT_LAMBDA_KL, DEFAULT_MASK_BOOST,
};

/// Seed of the held-out evaluation set used by the competence gate.
pub const HELD_OUT_SEED: u64 = 0xE7A1;

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: BTreeMap<String, i32>,
}

/// Norm gains, biases and the decay bias are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.contains("norm")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name == "proj.b"
        || name.ends_with("mixer.a"))
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Array2<f64>>,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
    ) {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .expect("gradient for a known parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(*t);
            let c2 = 1.0 - b2.powi(*t);
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    *p -= lr * (update + wd * *p);
                });
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Linear warmup followed by cosine decay to `final_frac * peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub final_frac: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_frac: f64, final_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_frac).round() as usize)
            .max(1)
            .min(total_steps.max(1));
        Self {
            peak,
            total_steps,
            warmup_steps,
            final_frac,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.final_frac + (1.0 - self.final_frac) * cos)
    }
}

/// Gradients of the named parameters from a backward pass.
fn param_grads(
    fp: &ForwardPass,
    grads: &mut super::tape::Grads,
    names: &dyn Fn(&str) -> bool,
) -> BTreeMap<String, Array2<f64>> {
    fp.params
        .iter()
        .filter(|(n, _)| names(n))
        .map(|(n, &v)| {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Array2::zeros(fp.tape.value(v).dim()));
            (n.clone(), g)
        })
        .collect()
}

/// Stacks per-sample `T x d` gradients into one `B*T x d` seed.
fn stack(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub dense: f64,
    pub smooth: f64,
    pub overall: f64,
    pub n_dense: usize,
    pub n_smooth: usize,
}

/// Teacher-forced exact-match accuracy per task.
pub fn evaluate(model: &ToyModel, samples: &[SynthSample]) -> Result<Accuracy, ModelError> {
    let (mut hit_d, mut hit_s, mut n_d, mut n_s) = (0usize, 0usize, 0usize, 0usize);
    for chunk in samples.chunks(64) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        let fp = model.forward(&make_batch(&refs), &ForwardOptions::inference())?;
        for (i, s) in chunk.iter().enumerate() {
            let ok = exact_match(&fp.logits_of(i), &s.labels);
            match s.task {
                Task::Dense => {
                    n_d += 1;
                    hit_d += usize::from(ok);
                }
                Task::Smooth => {
                    n_s += 1;
                    hit_s += usize::from(ok);
                }
            }
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Accuracy {
        dense: frac(hit_d, n_d),
        smooth: frac(hit_s, n_s),
        overall: frac(hit_d + hit_s, n_d + n_s),
        n_dense: n_d,
        n_smooth: n_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTraining {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Required held-out accuracy.
    pub gate: f64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 3e-3,
            max_steps: 6000,
            eval_every: 250,
            eval_samples: 512,
            gate: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    pub held_out: Accuracy,
    pub final_loss: f64,
}

/// Mean supervised cross-entropy of a batch and its gradient seed.
fn batch_ce(fp: &ForwardPass, samples: &[&SynthSample]) -> Result<(f64, Array2<f64>), ModelError> {
    let b = samples.len() as f64;
    let mut total = 0.0;
    let mut parts = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let logits = fp.logits_of(i);
        let (lv, terms) = kd_loss(&logits, &logits, &s.labels, 0.0, 1.0)?;
        total += terms.ce;
        parts.push(lv.grad.expect("gradient") / b);
    }
    Ok((total / b, stack(&parts)))
}

/// Trains an all-attention teacher on fresh synthetic batches until it passes
/// the held-out competence gate.
pub fn build_teacher(
    config: &ToyConfig,
    opts: &TeacherTraining,
) -> Result<(ToyModel, TeacherReport), ModelError> {
    let mut model = ToyModel::teacher(config)?;
    let held_out = synth_dataset(config, opts.eval_samples, HELD_OUT_SEED);
    let mut rng = derived_rng(config.seed, "teacher-batches");
    let mut adam = AdamW::new(0.9, 0.95, 1e-8, 0.0);
    let sched = LrSchedule::new(opts.lr, opts.max_steps, 0.02, 0.1);
    let all = |_: &str| true;
    let mut last_loss = f64::NAN;
    for step in 0..opts.max_steps {
        let batch_seed: u64 = rng.random::<u64>() >> 16;
        let samples = synth_dataset(config, opts.batch_size, batch_seed | (1 << 48));
        let refs: Vec<&SynthSample> = samples.iter().collect();
        let fp = model.forward(&make_batch(&refs), &ForwardOptions::training(&all))?;
        let (loss, seed) = batch_ce(&fp, &refs)?;
        last_loss = loss;
        let mut grads = fp.tape.backward(vec![(fp.logits, seed)]);
        let mut pg = param_grads(&fp, &mut grads, &all);
        clip_grad_norm(&mut pg, 1.0);
        adam.step(&mut model.params, &pg, sched.lr(step));
        if (step + 1) % opts.eval_every == 0 {
            let acc = evaluate(&model, &held_out)?;
            if acc.overall >= opts.gate {
                return Ok((
                    model,
                    TeacherReport {
                        steps: step + 1,
                        held_out: acc,
                        final_loss: loss,
                    },
                ));
            }
        }
    }
    let acc = evaluate(&model, &held_out)?;
    if acc.overall >= opts.gate {
        return Ok((
            model,
            TeacherReport {
                steps: opts.max_steps,
                held_out: acc,
                final_loss: last_loss,
            },
        ));
    }
    Err(ModelError::CompetenceGate {
        accuracy: acc.overall,
        required: opts.gate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl Condition {
    pub const ALL: [Condition; 5] = [Self::C1, Self::C2, Self::C3, Self::C4, Self::C5];

    pub fn description(self) -> &'static str {
        match self {
            Self::C1 => "end-to-end KD only",
            Self::C2 => "block-output alignment, then KD",
            Self::C3 => "uniform residual alignment, then KD",
            Self::C4 => "density-weighted residual alignment, then KD",
            Self::C5 => "gradient-weighted residual alignment, then KD",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(Self::C1),
            "C2" => Ok(Self::C2),
            "C3" => Ok(Self::C3),
            "C4" => Ok(Self::C4),
            "C5" => Ok(Self::C5),
            _ => Err(format!("unknown condition {s:?}; expected C1..C5")),
        }
    }
}

/// Alignment objective of the first two stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Alignment {
    /// No alignment stages; the whole budget goes to the end-to-end objective.
    None,
    /// Block outputs at the replaced layers.
    BlockOutputs,
    /// Residual stream, uniform weights.
    Uniform,
    /// Residual stream, density weights (from the cache when one is given).
    Density { tau: f64, beta: f64 },
    /// Residual stream, teacher-gradient weights.
    Gradient,
    /// Residual stream, `boost` on `k_percent` of visual positions.
    Mask {
        k_percent: f64,
        boost: f64,
        mode: MaskMode,
    },
}

impl Alignment {
    pub fn for_condition(c: Condition, tau: f64, beta: f64) -> Self {
        match c {
            Condition::C1 => Self::None,
            Condition::C2 => Self::BlockOutputs,
            Condition::C3 => Self::Uniform,
            Condition::C4 => Self::Density { tau, beta },
            Condition::C5 => Self::Gradient,
        }
    }

    pub fn mask(k_percent: f64, mode: MaskMode) -> Self {
        Self::Mask {
            k_percent,
            boost: DEFAULT_MASK_BOOST,
            mode,
        }
    }
}

/// Token budget split across the three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBudget {
    pub total_tokens: u64,
    pub fractions: [f64; 3],
}

impl Default for StageBudget {
    fn default() -> Self {
        Self {
            total_tokens: 1_000_000,
            fractions: [0.1, 0.3, 0.6],
        }
    }
}

impl StageBudget {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(ModelError::InvalidConfig(format!(
                "stage fractions {:?} must be non-negative and sum to 1",
                self.fractions
            )));
        }
        if self.total_tokens == 0 {
            return Err(ModelError::InvalidConfig(
                "total_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Whole batches per stage; stage budgets are floored to batch multiples.
    pub fn steps(&self, tokens_per_batch: u64, skip_alignment: bool) -> [usize; 3] {
        if skip_alignment {
            return [0, 0, (self.total_tokens / tokens_per_batch) as usize];
        }
        self.fractions.map(|f| {
            ((self.total_tokens as f64 * f) / tokens_per_batch as f64 + 1e-9).floor() as usize
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub grad_clip: f64,
    pub lambda_kl: f64,
    pub lambda_ce: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.01,
            final_lr_frac: 0.1,
            grad_clip: 1.0,
            lambda_kl: DEFAULT_LAMBDA_KL,
            lambda_ce: DEFAULT_LAMBDA_CE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ToyModel,
    pub logs: Vec<StepLog>,
    pub stage_tokens: [u64; 3],
    pub stage_steps: [usize; 3],
}

/// Per-sample alignment weights for the whole training set.
pub fn alignment_weights(
    alignment: &Alignment,
    teacher: &ToyModel,
    data: &[SynthSample],
    cache: Option<&DensityCache>,
) -> Result<Option<Vec<Vec<f64>>>, ModelError> {
    let nt = teacher.config.text_len;
    let out = match alignment {
        Alignment::None | Alignment::BlockOutputs => return Ok(None),
        Alignment::Uniform => data.iter().map(|s| vec![1.0; s.seq_len()]).collect(),
        Alignment::Density { tau, beta } => data
            .iter()
            .map(|s| Ok(sequence_weights(&sample_density(s, cache)?, nt, *tau, *beta)?.weights))
            .collect::<Result<_, ModelError>>()?,
        Alignment::Gradient => {
            let mut out = Vec::with_capacity(data.len());
            for chunk in data.chunks(64) {
                for field in fisher::position_sensitivity_batch(teacher, chunk)? {
                    out.push(fisher::grad_weight(&field, field.seq_len())?.weights);
                }
            }
            out
        }
        Alignment::Mask {
            k_percent,
            boost,
            mode,
        } => data
            .iter()
            .map(|s| {
                let map = sample_density(s, cache)?;
                let mode = match mode {
                    // one mask per sample, derived from the arm seed and the sample id
                    MaskMode::Random(seed) => {
                        MaskMode::Random(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ s.id)
                    }
                    m => *m,
                };
                Ok(topk_mask_weights(&map, *k_percent, *boost, mode)?
                    .with_unit_text(nt)
                    .weights)
            })
            .collect::<Result<_, ModelError>>()?,
    };
    Ok(Some(out))
}

/// Density map of a sample, decoded from the cache when present.
pub fn sample_density(
    s: &SynthSample,
    cache: Option<&DensityCache>,
) -> Result<DensityMap, ModelError> {
    match cache {
        Some(c) => {
            let entry = c.get(s.id).ok_or_else(|| {
                ModelError::Other(format!("sample {} missing from density cache", s.id))
            })?;
            if entry.n_positions() as usize != s.grid.len() {
                return Err(ModelError::Other(format!(
                    "cache entry for sample {} has {} positions, grid has {}",
                    s.id,
                    entry.n_positions(),
                    s.grid.len()
                )));
            }
            Ok(DensityMap::from_rho(entry.dequantized())?)
        }
        None => Ok(crate::density::normalize_density(patch_density(&s.grid)?)),
    }
}

/// Everything a distillation run needs besides the models and data.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPlan {
    pub alignment: Alignment,
    pub budget: StageBudget,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl DistillPlan {
    pub fn for_condition(c: Condition, budget: StageBudget, optim: OptimConfig, seed: u64) -> Self {
        Self {
            alignment: Alignment::for_condition(c, DEFAULT_TAU, DEFAULT_BETA),
            budget,
            optim,
            seed,
        }
    }
}

/// Teacher quantities a stage loss compares against.
struct TeacherView {
    residuals: Vec<Array2<f64>>,
    block_outputs: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn teacher_view(
    teacher: &ToyModel,
    batch: &Batch,
    taps: &[usize],
    mixers: &[usize],
) -> Result<Vec<TeacherView>, ModelError> {
    let fp = teacher.forward(batch, &ForwardOptions::inference())?;
    Ok((0..batch.size)
        .map(|i| TeacherView {
            residuals: taps.iter().map(|&t| fp.residual_of(t, i)).collect(),
            block_outputs: mixers.iter().map(|&l| fp.block_output_of(l, i)).collect(),
            logits: fp.logits_of(i),
        })
        .collect())
}

/// Batch-mean loss of one stage and the gradients of `trainable` student parameters.
pub fn stage_loss(
    teacher: &ToyModel,
    student: &ToyModel,
    samples: &[&SynthSample],
    weights: Option<&[&[f64]]>,
    alignment: &Alignment,
    stage: u8,
    optim: &OptimConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, Array2<f64>>), ModelError> {
    let cfg = &student.config;
    let taps = cfg.alignment_taps()?;
    let mixers = cfg.mixer_layers()?;
    let batch = make_batch(samples);
    let views = teacher_view(teacher, &batch, &taps, &mixers)?;
    let fp = student.forward(&batch, &ForwardOptions::training(trainable))?;
    let b = samples.len() as f64;
    let mut total = 0.0;
    let mut seeds = Vec::new();
    if stage == 3 || matches!(alignment, Alignment::None) {
        let mut parts = Vec::with_capacity(samples.len());
        for (i, (s, tv)) in samples.iter().zip(&views).enumerate() {
            let (lv, _) = kd_loss(
                &fp.logits_of(i),
                &tv.logits,
                &s.labels,
                optim.lambda_kl,
                optim.lambda_ce,
            )?;
            total += lv.value;
            parts.push(lv.grad.expect("gradient") / b);
        }
        seeds.push((fp.logits, stack(&parts)));
    } else if matches!(alignment, Alignment::BlockOutputs) {
        let mut parts: Vec<Vec<Array2<f64>>> = vec![Vec::new(); mixers.len()];
        for (i, tv) in views.iter().enumerate() {
            let so: Vec<Array2<f64>> = mixers.iter().map(|&l| fp.block_output_of(l, i)).collect();
            let lv = hsa_loss(&so, &tv.block_outputs)?;
            total += lv.value;
            for (k, g) in lv.grad.expect("gradient").into_iter().enumerate() {
                parts[k].push(g / b);
            }
        }
        for (k, &l) in mixers.iter().enumerate() {
            seeds.push((fp.block_outputs[l], stack(&parts[k])));
        }
    } else {
        let weights = weights.ok_or_else(|| {
            ModelError::Other("residual alignment needs per-sample weights".into())
        })?;
        let mut parts: Vec<Vec<Array2<f64>>> = vec![Vec::new(); taps.len()];
        for (i, tv) in views.into_iter().enumerate() {
            let st = fp.trace(&taps, i);
            let tt = ResidualTrace {
                layers: taps.clone(),
                residuals: tv.residuals,
                logits: tv.logits,
            };
            let lv = match alignment {
                Alignment::Uniform => rsa_loss(&st, &tt)?,
                // gradient weights vanish where the teacher loss is insensitive
                Alignment::Gradient => weighted_residual_loss(&st, &tt, weights[i])?,
                _ => {
                    let w = WeightVector {
                        weights: weights[i].to_vec(),
                        visual_count: cfg.visual_len(),
                        text_count: cfg.text_len,
                        tau: f64::NAN,
                        beta: f64::NAN,
                    };
                    heed_loss(&st, &tt, &w)?
                }
            };
            total += lv.value;
            for (k, g) in lv.grad.expect("gradient").into_iter().enumerate() {
                parts[k].push(g / b);
            }
        }
        for (k, &t) in taps.iter().enumerate() {
            seeds.push((fp.residuals[t], stack(&parts[k])));
        }
    }
    let mut grads = fp.tape.backward(seeds);
    Ok((total / b, param_grads(&fp, &mut grads, trainable)))
}

fn stage_trainable(student: &ToyModel, stage: u8) -> Result<Vec<String>, ModelError> {
    let mixers = student.config.mixer_layers()?;
    Ok(if stage == 1 {
        mixers
            .iter()
            .flat_map(|&l| mixer_new_param_names(l))
            .collect()
    } else {
        student
            .params
            .keys()
            .filter(|n| is_mixer_param(n))
            .cloned()
            .collect()
    })
}

/// Runs the staged schedule. Only mixer parameters are ever updated; stage 1
/// updates only the gate, decay and convolution parameters.
pub fn distill(
    teacher: &ToyModel,
    student: &ToyModel,
    data: &[SynthSample],
    plan: &DistillPlan,
    cache: Option<&DensityCache>,
) -> Result<DistillOutcome, ModelError> {
    plan.budget.validate()?;
    if data.is_empty() {
        return Err(ModelError::Other("empty training set".into()));
    }
    if teacher.config != student.config || teacher.frozen_hash() != student.frozen_hash() {
        return Err(ModelError::Other(
            "student was not hybridized from this teacher".into(),
        ));
    }
    if cache.is_some()
        && !matches!(
            plan.alignment,
            Alignment::Density { .. } | Alignment::Mask { .. }
        )
    {
        return Err(ModelError::Other(format!(
            "a density cache was supplied but the alignment {:?} does not use density",
            plan.alignment
        )));
    }
    let cfg = &student.config;
    let bsz = plan.optim.batch_size.max(1);
    let tokens_per_batch = (bsz * cfg.seq_len()) as u64;
    let skip = matches!(plan.alignment, Alignment::None);
    let steps = plan.budget.steps(tokens_per_batch, skip);
    let total_steps: usize = steps.iter().sum();
    let sched = LrSchedule::new(
        plan.optim.peak_lr,
        total_steps,
        plan.optim.warmup_frac,
        plan.optim.final_lr_frac,
    );
    let weights = alignment_weights(&plan.alignment, teacher, data, cache)?;

    let mut student = student.clone();
    let mut adam = AdamW::new(
        plan.optim.beta1,
        plan.optim.beta2,
        plan.optim.eps,
        plan.optim.weight_decay,
    );
    let mut rng = derived_rng(plan.seed, "distill-order");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut logs = Vec::with_capacity(total_steps);
    let mut tokens = 0u64;
    let mut step = 0;
    let mut stage_tokens = [0u64; 3];
    for (si, &n) in steps.iter().enumerate() {
        let stage = si as u8 + 1;
        if n == 0 {
            continue;
        }
        let names = stage_trainable(&student, stage)?;
        let trainable = |n: &str| names.iter().any(|x| x == n);
        for _ in 0..n {
            let mut idx = Vec::with_capacity(bsz);
            while idx.len() < bsz {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let samples: Vec<&SynthSample> = idx.iter().map(|&i| &data[i]).collect();
            let w: Option<Vec<&[f64]>> = weights
                .as_ref()
                .map(|w| idx.iter().map(|&i| w[i].as_slice()).collect());
            let (loss, mut grads) = stage_loss(
                teacher,
                &student,
                &samples,
                w.as_deref(),
                &plan.alignment,
                stage,
                &plan.optim,
                &trainable,
            )?;
            clip_grad_norm(&mut grads, plan.optim.grad_clip);
            let lr = sched.lr(step);
            adam.step(&mut student.params, &grads, lr);
            tokens += tokens_per_batch;
            stage_tokens[si] += tokens_per_batch;
            logs.push(StepLog {
                step,
                stage,
                loss,
                lr,
                tokens,
            });
            step += 1;
        }
    }
    Ok(DistillOutcome {
        student,
        logs,
        stage_tokens,
        stage_steps: steps,
    })
}
