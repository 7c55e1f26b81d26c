//! Toy teacher decoder, hybrid student, synthetic data and distillation.
//!
//! Sequences are a visual prefix (projected patch features) followed by text
//! tokens. Blocks are pre-norm: `h += mix(norm1(h)); h += mlp(norm2(h))`,
//! where `mix` is causal softmax attention (teacher) or a gated linear
//! recurrence (student mixer).

pub mod checkpoint;
pub mod data;
pub mod tape;
pub mod train;

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::ResidualTrace;
use tape::{Tape, Var};

/// Taps of the depthwise causal convolution in mixer blocks.
pub const CONV_WIDTH: usize = 4;
/// Standard deviation of freshly initialized mixer parameters.
pub const MIXER_INIT_STD: f64 = 0.02;
/// Per-head decay at initialization.
pub const INIT_DECAY: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {got} positions exceeds the configured {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("teacher reached {accuracy:.3} held-out accuracy, below the {required:.2} gate")]
    CompetenceGate { accuracy: f64, required: f64 },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Density(#[from] crate::density::DensityError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub patch_dim: usize,
    pub text_len: usize,
    pub mlp_hidden: usize,
    /// Fraction of layers replaced by mixers in the student.
    pub mixer_ratio: f64,
    /// Glyph patches per image.
    pub n_glyphs: usize,
    /// Noise scale of background patches around their shared direction.
    pub background_noise: f64,
    /// Noise scale of glyph patches around their codebook direction.
    pub glyph_noise: f64,
    /// Initial scale of the learned positional embeddings.
    pub pos_embed_std: f64,
    /// Seeds the teacher initialization and the data codebooks.
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 2,
            vocab: 64,
            grid_height: 6,
            grid_width: 6,
            patch_dim: 16,
            text_len: 8,
            mlp_hidden: 64,
            mixer_ratio: 0.75,
            n_glyphs: 2,
            background_noise: 0.3,
            glyph_noise: 0.2,
            pos_embed_std: 0.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn visual_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn seq_len(&self) -> usize {
        self.visual_len() + self.text_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return bad("layer count, widths and head count must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.grid_height < 3 || self.grid_width < 3 || self.patch_dim < 2 {
            return bad("grid must be at least 3x3 with patch_dim >= 2".into());
        }
        if self.text_len < 4 {
            return bad(format!("text_len {} < 4", self.text_len));
        }
        if self.vocab < data::MIN_VOCAB {
            return bad(format!("vocab {} < {}", self.vocab, data::MIN_VOCAB));
        }
        if self.n_glyphs == 0
            || self.n_glyphs > data::GLYPH_SETS
            || self.n_glyphs >= self.visual_len() / 4
        {
            return bad(format!("n_glyphs {} out of range", self.n_glyphs));
        }
        if !(self.background_noise >= 0.0 && self.glyph_noise >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        self.mixer_layers()?;
        Ok(())
    }

    /// Layers replaced by mixers: the first `p` of every group of `q` layers for
    /// `mixer_ratio = p/q` in lowest terms.
    pub fn mixer_layers(&self) -> Result<Vec<usize>, ModelError> {
        let r = self.mixer_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "mixer_ratio {r} must lie in (0, 1)"
            )));
        }
        for q in 2..=self.n_layers {
            let p = (r * q as f64).round();
            if (r * q as f64 - p).abs() < 1e-9 && p >= 1.0 {
                if self.n_layers % q != 0 {
                    break;
                }
                let p = p as usize;
                return Ok((0..self.n_layers).filter(|l| l % q < p).collect());
            }
        }
        Err(ModelError::InvalidConfig(format!(
            "mixer_ratio {r} is not representable with {} layers",
            self.n_layers
        )))
    }

    /// Residual-stream indices read by the alignment losses: one past each mixer layer.
    pub fn alignment_taps(&self) -> Result<Vec<usize>, ModelError> {
        Ok(self.mixer_layers()?.into_iter().map(|l| l + 1).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Attention,
    Mixer,
}

/// Parameters of a teacher or hybrid student, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub kinds: Vec<BlockKind>,
    pub params: BTreeMap<String, Array2<f64>>,
}

/// Parameter names of the mixer sublayer at layer `l`.
pub fn mixer_param_names(l: usize) -> [String; 8] {
    ["wq", "wk", "wv", "wo", "wg", "wgamma", "a", "wconv"].map(|n| format!("layers.{l}.mixer.{n}"))
}

/// Parameters trained in the first distillation stage.
pub fn mixer_new_param_names(l: usize) -> [String; 4] {
    ["wg", "wgamma", "a", "wconv"].map(|n| format!("layers.{l}.mixer.{n}"))
}

pub fn is_mixer_param(name: &str) -> bool {
    name.contains(".mixer.")
}

/// A batch of equal-length sequences; rows of `patches` are `size * visual_len` patch features.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub patches: Array2<f64>,
    pub tokens: Vec<usize>,
}

pub struct ForwardOptions<'a> {
    /// Parameters whose gradients are needed.
    pub trainable: &'a dyn Fn(&str) -> bool,
    /// Hides positions from every attention layer's keys and values.
    pub key_mask: Option<&'a [bool]>,
    /// Adds `delta` (`batch * seq` rows) to residual-stream index `t` before later layers read it.
    pub residual_delta: Option<(usize, &'a Array2<f64>)>,
}

impl ForwardOptions<'static> {
    pub fn inference() -> Self {
        Self {
            trainable: &|_| false,
            key_mask: None,
            residual_delta: None,
        }
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn training(trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            trainable,
            key_mask: None,
            residual_delta: None,
        }
    }
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub params: BTreeMap<String, Var>,
    /// Residual stream before layer 0 and after every layer (`n_layers + 1` entries).
    pub residuals: Vec<Var>,
    /// Attention or mixer output of every layer, before the residual addition.
    pub block_outputs: Vec<Var>,
    /// Attention nodes (teacher-style layers only).
    pub attention: Vec<Option<Var>>,
    pub logits: Var,
    pub batch: usize,
    pub seq: usize,
}

impl ForwardPass {
    fn rows(&self, v: Var, sample: usize) -> Array2<f64> {
        self.tape
            .value(v)
            .slice(s![sample * self.seq..(sample + 1) * self.seq, ..])
            .to_owned()
    }

    pub fn logits_of(&self, sample: usize) -> Array2<f64> {
        self.rows(self.logits, sample)
    }

    pub fn residual_of(&self, index: usize, sample: usize) -> Array2<f64> {
        self.rows(self.residuals[index], sample)
    }

    pub fn block_output_of(&self, layer: usize, sample: usize) -> Array2<f64> {
        self.rows(self.block_outputs[layer], sample)
    }

    /// Residual snapshots at `taps` plus logits for one sample.
    pub fn trace(&self, taps: &[usize], sample: usize) -> ResidualTrace {
        ResidualTrace {
            layers: taps.to_vec(),
            residuals: taps.iter().map(|&t| self.residual_of(t, sample)).collect(),
            logits: self.logits_of(sample),
        }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Normal draws rejected outside two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let z: f64 = n.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ToyModel {
    /// Randomly initialized all-attention decoder.
    pub fn teacher(config: &ToyConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EAC_4E12);
        let (d, h, v) = (config.d_model, config.mlp_hidden, config.vocab);
        let out_std = 1.0 / ((d as f64).sqrt() * (2.0 * config.n_layers as f64).sqrt());
        let mut p = BTreeMap::new();
        p.insert("embed.tok".into(), normal_matrix(&mut rng, v, d, 1.0));
        p.insert(
            "embed.pos".into(),
            normal_matrix(&mut rng, config.seq_len(), d, config.pos_embed_std),
        );
        p.insert(
            "proj.w".into(),
            normal_matrix(
                &mut rng,
                config.patch_dim,
                d,
                1.0 / (config.patch_dim as f64).sqrt(),
            ),
        );
        p.insert("proj.b".into(), Array2::zeros((1, d)));
        let dstd = 1.0 / (d as f64).sqrt();
        for l in 0..config.n_layers {
            p.insert(format!("layers.{l}.norm1"), Array2::ones((1, d)));
            for n in ["wq", "wk", "wv"] {
                p.insert(
                    format!("layers.{l}.attn.{n}"),
                    normal_matrix(&mut rng, d, d, dstd),
                );
            }
            p.insert(
                format!("layers.{l}.attn.wo"),
                normal_matrix(&mut rng, d, d, out_std),
            );
            p.insert(format!("layers.{l}.norm2"), Array2::ones((1, d)));
            p.insert(
                format!("layers.{l}.mlp.w1"),
                normal_matrix(&mut rng, d, h, dstd),
            );
            p.insert(format!("layers.{l}.mlp.b1"), Array2::zeros((1, h)));
            p.insert(
                format!("layers.{l}.mlp.w2"),
                normal_matrix(
                    &mut rng,
                    h,
                    d,
                    1.0 / ((h as f64).sqrt() * (2.0 * config.n_layers as f64).sqrt()),
                ),
            );
            p.insert(format!("layers.{l}.mlp.b2"), Array2::zeros((1, d)));
        }
        p.insert("final_norm".into(), Array2::ones((1, d)));
        p.insert("head.w".into(), normal_matrix(&mut rng, d, v, dstd));
        Ok(Self {
            config: config.clone(),
            kinds: vec![BlockKind::Attention; config.n_layers],
            params: p,
        })
    }

    /// Replaces the configured layers with mixers. Q/K/V/O are copied from the
    /// teacher layer; gate, decay and convolution weights are drawn from a
    /// truncated normal, with the decay bias centred on `logit(INIT_DECAY)`.
    pub fn hybridize(teacher: &ToyModel, seed: u64) -> Result<Self, ModelError> {
        if teacher.kinds.iter().any(|k| *k != BlockKind::Attention) {
            return Err(ModelError::InvalidConfig(
                "hybridize expects an all-attention teacher".into(),
            ));
        }
        let cfg = &teacher.config;
        let mixers = cfg.mixer_layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D49_5845);
        let mut params = teacher.params.clone();
        let mut kinds = teacher.kinds.clone();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        for &l in &mixers {
            kinds[l] = BlockKind::Mixer;
            for n in ["wq", "wk", "wv", "wo"] {
                let w = params
                    .remove(&format!("layers.{l}.attn.{n}"))
                    .ok_or_else(|| ModelError::MissingParam(format!("layers.{l}.attn.{n}")))?;
                params.insert(format!("layers.{l}.mixer.{n}"), w);
            }
            params.insert(
                format!("layers.{l}.mixer.wg"),
                truncated_normal(&mut rng, d, d, MIXER_INIT_STD),
            );
            params.insert(
                format!("layers.{l}.mixer.wgamma"),
                truncated_normal(&mut rng, d, heads, MIXER_INIT_STD),
            );
            let a = truncated_normal(&mut rng, 1, heads, MIXER_INIT_STD) + logit(INIT_DECAY);
            params.insert(format!("layers.{l}.mixer.a"), a);
            params.insert(
                format!("layers.{l}.mixer.wconv"),
                truncated_normal(&mut rng, CONV_WIDTH, d, MIXER_INIT_STD),
            );
        }
        Ok(Self {
            config: cfg.clone(),
            kinds,
            params,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Array2<f64>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// SHA-256 over names, shapes and bytes of the parameters selected by `filter`.
    pub fn param_hash(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| filter(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((p.nrows() as u64).to_le_bytes());
            h.update((p.ncols() as u64).to_le_bytes());
            for x in p.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of every parameter outside the token-mixing sublayers of the mixer layers.
    pub fn frozen_hash(&self) -> String {
        let prefixes: Vec<String> = self
            .config
            .mixer_layers()
            .unwrap_or_default()
            .iter()
            .map(|l| format!("layers.{l}.attn."))
            .collect();
        self.param_hash(|n| {
            !is_mixer_param(n) && !prefixes.iter().any(|p| n.starts_with(p.as_str()))
        })
    }

    pub fn forward(&self, batch: &Batch, opts: &ForwardOptions) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        let (nv, nt) = (cfg.visual_len(), batch.tokens.len() / batch.size.max(1));
        if batch.size == 0 || batch.tokens.len() != batch.size * nt || nt == 0 {
            return Err(ModelError::Shape("empty batch or ragged text".into()));
        }
        if nv + nt > cfg.seq_len() {
            return Err(ModelError::SequenceTooLong {
                got: nv + nt,
                max: cfg.seq_len(),
            });
        }
        if batch.patches.dim() != (batch.size * nv, cfg.patch_dim) {
            return Err(ModelError::Shape(format!(
                "patches {:?}, expected {:?}",
                batch.patches.dim(),
                (batch.size * nv, cfg.patch_dim)
            )));
        }
        if let Some(v) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(ModelError::Shape(format!("token {v} outside vocabulary")));
        }
        let seq = nv + nt;
        if let Some(m) = opts.key_mask {
            if m.len() != seq {
                return Err(ModelError::Shape(format!(
                    "key mask of {} for {seq} positions",
                    m.len()
                )));
            }
        }

        let mut tape = Tape::new();
        let mut pv = BTreeMap::new();
        for (name, value) in &self.params {
            let var = tape.leaf(value.clone(), (opts.trainable)(name));
            pv.insert(name.clone(), var);
        }
        let p = |n: &str| -> Result<Var, ModelError> {
            pv.get(n)
                .copied()
                .ok_or_else(|| ModelError::MissingParam(n.into()))
        };

        let patches = tape.leaf(batch.patches.clone(), false);
        let vis = tape.matmul(patches, p("proj.w")?);
        let vis = tape.add_tiled(vis, p("proj.b")?);
        let txt = tape.gather(p("embed.tok")?, &batch.tokens);
        let x = tape.interleave(vis, txt, nv, nt);
        let pos = if seq == cfg.seq_len() {
            p("embed.pos")?
        } else {
            let sliced = self.param("embed.pos")?.slice(s![..seq, ..]).to_owned();
            let needs = (opts.trainable)("embed.pos");
            tape.leaf(sliced, needs)
        };
        let mut h = tape.add_tiled(x, pos);
        let perturb = |tape: &mut Tape, h: Var, index: usize| -> Result<Var, ModelError> {
            match opts.residual_delta {
                Some((t, delta)) if t == index => {
                    if delta.dim() != tape.value(h).dim() {
                        return Err(ModelError::Shape(format!(
                            "residual delta {:?}",
                            delta.dim()
                        )));
                    }
                    let d = tape.leaf(delta.clone(), false);
                    Ok(tape.add(h, d))
                }
                _ => Ok(h),
            }
        };
        h = perturb(&mut tape, h, 0)?;

        let mut residuals = vec![h];
        let mut block_outputs = Vec::with_capacity(cfg.n_layers);
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for (l, kind) in self.kinds.iter().enumerate() {
            let xn = tape.rms_norm(h, p(&format!("layers.{l}.norm1"))?);
            let out = match kind {
                BlockKind::Attention => {
                    let w = |n: &str| p(&format!("layers.{l}.attn.{n}"));
                    let q = tape.matmul(xn, w("wq")?);
                    let k = tape.matmul(xn, w("wk")?);
                    let v = tape.matmul(xn, w("wv")?);
                    let att = tape.attention(q, k, v, cfg.n_heads, seq, opts.key_mask);
                    attention.push(Some(att));
                    tape.matmul(att, w("wo")?)
                }
                BlockKind::Mixer => {
                    attention.push(None);
                    let w = |n: &str| p(&format!("layers.{l}.mixer.{n}"));
                    let conv = tape.causal_conv(xn, w("wconv")?, seq);
                    let u = tape.add(xn, conv);
                    let q = tape.matmul(u, w("wq")?);
                    let k = tape.matmul(u, w("wk")?);
                    let v = tape.matmul(u, w("wv")?);
                    let pre = tape.matmul(xn, w("wgamma")?);
                    let pre = tape.add_tiled(pre, w("a")?);
                    let decay = tape.sigmoid(pre);
                    let y = tape.recurrence(q, k, v, decay, cfg.n_heads, seq);
                    let gpre = tape.matmul(xn, w("wg")?);
                    let gate = tape.sigmoid(gpre);
                    let gated = tape.mul(y, gate);
                    tape.matmul(gated, w("wo")?)
                }
            };
            block_outputs.push(out);
            h = tape.add(h, out);
            let xn = tape.rms_norm(h, p(&format!("layers.{l}.norm2"))?);
            let m = tape.matmul(xn, p(&format!("layers.{l}.mlp.w1"))?);
            let m = tape.add_tiled(m, p(&format!("layers.{l}.mlp.b1"))?);
            let m = tape.silu(m);
            let m = tape.matmul(m, p(&format!("layers.{l}.mlp.w2"))?);
            let m = tape.add_tiled(m, p(&format!("layers.{l}.mlp.b2"))?);
            h = tape.add(h, m);
            h = perturb(&mut tape, h, l + 1)?;
            residuals.push(h);
        }
        let hn = tape.rms_norm(h, p("final_norm")?);
        let logits = tape.matmul(hn, p("head.w")?);
        Ok(ForwardPass {
            tape,
            params: pv,
            residuals,
            block_outputs,
            attention,
            logits,
            batch: batch.size,
            seq,
        })
    }

    /// Logits and residual snapshots at the alignment taps for one sequence.
    pub fn forward_with_residuals(
        &self,
        sample: &data::SynthSample,
    ) -> Result<ResidualTrace, ModelError> {
        let batch = data::make_batch(&[sample]);
        let fp = self.forward(&batch, &ForwardOptions::inference())?;
        Ok(fp.trace(&self.config.alignment_taps()?, 0))
    }
}

/// Fresh generator for a named purpose under a run seed.
pub fn derived_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}
