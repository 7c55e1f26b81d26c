//! Synthetic image-plus-prompt samples with controllable density structure.
//!
//! Each image is a grid of patch features. Background patches scatter tightly
//! around one direction; a few glyph patches come from fixed codebooks and
//! stand out as high-density positions. The dense-recall task asks for the
//! glyph tokens; the smooth task asks for a class encoded by the background
//! direction, which every patch carries.
//!
//! Text layout: `[task, filler.., ANSWER, ans1, ans2]`. The positions of
//! `ANSWER` and `ans1` are supervised with `ans1` and `ans2`.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derived_rng, Batch, ToyConfig};
use crate::density::{patch_density, PatchGrid};

pub const PAD: usize = 0;
pub const TASK_DENSE: usize = 2;
pub const TASK_SMOOTH: usize = 3;
pub const ANSWER: usize = 5;
pub const END: usize = 6;
pub const GLYPH_BASE: usize = 8;
/// Glyph codebooks; glyph `i` of an image is drawn from codebook `i`.
pub const GLYPH_SETS: usize = 2;
pub const GLYPHS_PER_SET: usize = 8;
pub const CLASS_BASE: usize = GLYPH_BASE + GLYPH_SETS * GLYPHS_PER_SET;
pub const N_CLASSES: usize = 8;
pub const FILLER_BASE: usize = CLASS_BASE + N_CLASSES;
pub const N_FILLERS: usize = 32;
pub const MIN_VOCAB: usize = FILLER_BASE + N_FILLERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Dense,
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: u64,
    pub task: Task,
    pub grid: PatchGrid,
    /// Raster indices of the glyph patches, in codebook order.
    pub glyph_positions: Vec<usize>,
    pub glyph_token_ids: Vec<usize>,
    pub tokens: Vec<usize>,
    pub answer: Vec<usize>,
    /// One entry per sequence position (visual prefix included); `None` is ignored.
    pub labels: Vec<Option<usize>>,
}

impl SynthSample {
    pub fn seq_len(&self) -> usize {
        self.grid.len() + self.tokens.len()
    }

    /// Sequence positions carrying supervision.
    pub fn label_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(p, l)| l.map(|_| p))
            .collect()
    }
}

/// Fixed unit directions for glyphs and classes, shared by every dataset of a config.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub glyphs: Vec<Vec<Vec<f64>>>,
    pub classes: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Codebook {
    pub fn new(config: &ToyConfig) -> Self {
        let mut rng = derived_rng(config.seed, "codebook");
        let dim = config.patch_dim;
        let glyphs = (0..GLYPH_SETS)
            .map(|_| {
                (0..GLYPHS_PER_SET)
                    .map(|_| unit_vector(&mut rng, dim))
                    .collect()
            })
            .collect();
        let classes = (0..N_CLASSES).map(|_| unit_vector(&mut rng, dim)).collect();
        Self { glyphs, classes }
    }
}

fn noisy(rng: &mut ChaCha8Rng, dir: &[f64], scale: f64) -> Vec<f64> {
    let s = scale / (dir.len() as f64).sqrt();
    dir.iter()
        .map(|d| d + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `n` samples alternating dense and smooth tasks, starting with dense.
pub fn synth_dataset(config: &ToyConfig, n: usize, seed: u64) -> Vec<SynthSample> {
    let book = Codebook::new(config);
    let mut rng = derived_rng(seed, "synth");
    (0..n)
        .map(|i| {
            let task = if i % 2 == 0 {
                Task::Dense
            } else {
                Task::Smooth
            };
            let sample_seed: u64 = rng.random();
            generate(config, &book, (seed << 32) | i as u64, task, sample_seed)
        })
        .collect()
}

/// `n` samples of a single task.
pub fn synth_task(config: &ToyConfig, n: usize, seed: u64, task: Task) -> Vec<SynthSample> {
    let book = Codebook::new(config);
    let mut rng = derived_rng(seed, "synth-task");
    (0..n)
        .map(|i| {
            let sample_seed: u64 = rng.random();
            generate(config, &book, (seed << 32) | i as u64, task, sample_seed)
        })
        .collect()
}

pub fn generate(
    config: &ToyConfig,
    book: &Codebook,
    id: u64,
    task: Task,
    sample_seed: u64,
) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let nv = config.visual_len();
    let dim = config.patch_dim;
    let class = rng.random_range(0..N_CLASSES);
    let background = match task {
        Task::Dense => unit_vector(&mut rng, dim),
        Task::Smooth => book.classes[class].clone(),
    };
    let positions: Vec<usize> = rand::seq::index::sample(&mut rng, nv, config.n_glyphs).into_vec();
    let glyph_ids: Vec<usize> = (0..config.n_glyphs)
        .map(|_| rng.random_range(0..GLYPHS_PER_SET))
        .collect();

    let mut features = Vec::with_capacity(nv * dim);
    for p in 0..nv {
        let patch = match positions.iter().position(|&q| q == p) {
            Some(set) => noisy(
                &mut rng,
                &book.glyphs[set][glyph_ids[set]],
                config.glyph_noise,
            ),
            None => noisy(&mut rng, &background, config.background_noise),
        };
        features.extend(patch);
    }
    let grid =
        PatchGrid::new(config.grid_height, config.grid_width, dim, features).expect("valid grid");

    let glyph_token_ids: Vec<usize> = glyph_ids
        .iter()
        .enumerate()
        .map(|(set, g)| GLYPH_BASE + set * GLYPHS_PER_SET + g)
        .collect();
    let answer = match task {
        Task::Dense => {
            let mut a = glyph_token_ids.clone();
            a.resize(2, END);
            a
        }
        Task::Smooth => vec![CLASS_BASE + class, END],
    };
    let mut tokens = vec![if task == Task::Dense {
        TASK_DENSE
    } else {
        TASK_SMOOTH
    }];
    tokens.extend((0..config.text_len - 4).map(|_| FILLER_BASE + rng.random_range(0..N_FILLERS)));
    tokens.push(ANSWER);
    tokens.extend(&answer);

    let mut labels = vec![None; nv + config.text_len];
    let ans_pos = nv + config.text_len - 3;
    labels[ans_pos] = Some(answer[0]);
    labels[ans_pos + 1] = Some(answer[1]);
    SynthSample {
        id,
        task,
        grid,
        glyph_positions: positions,
        glyph_token_ids,
        tokens,
        answer,
        labels,
    }
}

/// Fraction of samples whose every glyph patch is denser than every background patch.
pub fn glyph_separation(samples: &[SynthSample]) -> f64 {
    let ok = samples
        .iter()
        .filter(|s| {
            let map = match patch_density(&s.grid) {
                Ok(m) => m,
                Err(_) => return false,
            };
            let min_glyph = s
                .glyph_positions
                .iter()
                .map(|&p| map.rho[p])
                .fold(f64::INFINITY, f64::min);
            (0..map.len())
                .filter(|p| !s.glyph_positions.contains(p))
                .all(|p| map.rho[p] < min_glyph)
        })
        .count();
    ok as f64 / samples.len().max(1) as f64
}

pub fn make_batch(samples: &[&SynthSample]) -> Batch {
    let nv = samples.first().map_or(0, |s| s.grid.len());
    let dim = samples.first().map_or(0, |s| s.grid.dim());
    let mut patches = Array2::zeros((samples.len() * nv, dim));
    for (i, s) in samples.iter().enumerate() {
        let block =
            Array2::from_shape_vec((nv, dim), s.grid.features().to_vec()).expect("grid shape");
        patches
            .slice_mut(ndarray::s![i * nv..(i + 1) * nv, ..])
            .assign(&block);
    }
    Batch {
        size: samples.len(),
        patches,
        tokens: samples
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect(),
    }
}

/// Teacher-forced exact match: every supervised position's argmax equals its label.
pub fn exact_match(logits: &Array2<f64>, labels: &[Option<usize>]) -> bool {
    labels.iter().enumerate().all(|(p, l)| match l {
        None => true,
        Some(l) => {
            let row = logits.index_axis(Axis(0), p);
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0;
            best == *l
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = ToyConfig::default();
        let a = synth_dataset(&cfg, 20, 5);
        let b = synth_dataset(&cfg, 20, 5);
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(&cfg, 20, 6));
        for s in &a {
            assert_eq!(s.tokens.len(), cfg.text_len);
            assert_eq!(s.labels.len(), cfg.seq_len());
            assert_eq!(
                s.label_positions(),
                vec![cfg.seq_len() - 3, cfg.seq_len() - 2]
            );
            assert!(s.tokens.iter().all(|&t| t < cfg.vocab));
            assert_eq!(&s.tokens[cfg.text_len - 2..], &s.answer[..]);
            if s.task == Task::Dense {
                assert_eq!(s.answer, s.glyph_token_ids);
            }
        }
    }

    #[test]
    fn glyphs_are_the_densest_patches() {
        let cfg = ToyConfig::default();
        let samples = synth_dataset(&cfg, 400, 11);
        assert!(glyph_separation(&samples) >= 0.99);
    }

    #[test]
    fn answer_depends_only_on_glyphs() {
        let cfg = ToyConfig::default();
        let book = Codebook::new(&cfg);
        for seed in 0..50 {
            let s = generate(&cfg, &book, 0, Task::Dense, seed);
            for (set, (&p, &tok)) in s.glyph_positions.iter().zip(&s.glyph_token_ids).enumerate() {
                let f = s.grid.feature(p / cfg.grid_width, p % cfg.grid_width);
                let nearest = (0..GLYPHS_PER_SET)
                    .max_by(|&a, &b| {
                        let dot = |g: usize| {
                            book.glyphs[set][g]
                                .iter()
                                .zip(f)
                                .map(|(x, y)| x * y)
                                .sum::<f64>()
                        };
                        dot(a).total_cmp(&dot(b))
                    })
                    .unwrap();
                assert_eq!(tok, GLYPH_BASE + set * GLYPHS_PER_SET + nearest);
            }
        }
    }
}
