//! Teacher building, condition runs, diagnostics and the masking control.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::report::{
    compare_conditions, paired_stats, Aggregate, ControlCurve, ControlReport, ControlRow,
    EvalAccuracy, ReferenceControl, ReferenceValues, RunDiagnostics, RunReport, RunSummary,
    TeacherSummary, TrainingSummary, SCHEMA_VERSION,
};
use super::{ExperimentConfig, HarnessError};
use crate::density::patch_density;
use crate::diagnostics::{
    decile_summary, mean_per_image_spearman, regress_records, token_records, TokenType,
};
use crate::fisher::position_sensitivity_batch;
use crate::losses::MaskMode;
use crate::model::data::{synth_dataset, synth_task, SynthSample, Task};
use crate::model::train::{
    build_teacher, distill, evaluate, Alignment, Condition, DistillOutcome, DistillPlan,
    TeacherReport,
};
use crate::model::{checkpoint, ToyConfig, ToyModel};

/// Teachers keyed by experiment seed, built on first use.
#[derive(Default)]
pub struct Teachers {
    built: BTreeMap<u64, (ToyModel, TeacherReport)>,
}

impl Teachers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &mut self,
        cfg: &ExperimentConfig,
        seed: u64,
    ) -> Result<&(ToyModel, TeacherReport), HarnessError> {
        if !self.built.contains_key(&seed) {
            let built = teacher_for_seed(cfg, seed)?;
            self.built.insert(seed, built);
        }
        Ok(&self.built[&seed])
    }
}

pub fn seed_toy(cfg: &ExperimentConfig, seed: u64) -> ToyConfig {
    ToyConfig {
        seed,
        ..cfg.toy.clone()
    }
}

pub fn teacher_for_seed(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ToyModel, TeacherReport), HarnessError> {
    Ok(build_teacher(&seed_toy(cfg, seed), &cfg.teacher)?)
}

/// Every sample set one experiment seed uses, each from its own data seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Vec<SynthSample>,
    pub dense_eval: Vec<SynthSample>,
    pub smooth_eval: Vec<SynthSample>,
    pub diagnostic: Vec<SynthSample>,
}

impl SeedData {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        let toy = seed_toy(cfg, seed);
        let d = &cfg.data;
        let base = 4 * seed;
        Self {
            train: synth_dataset(&toy, d.train_samples, base + 1),
            dense_eval: synth_task(&toy, d.eval_samples, base + 2, Task::Dense),
            smooth_eval: synth_task(&toy, d.eval_samples, base + 3, Task::Smooth),
            diagnostic: synth_task(&toy, d.diagnostic_samples, base + 4, Task::Dense),
        }
    }
}

pub struct RunArtifacts {
    pub report: RunReport,
    pub outcome: DistillOutcome,
}

fn eval_accuracy(model: &ToyModel, data: &SeedData) -> Result<EvalAccuracy, HarnessError> {
    let dense = evaluate(model, &data.dense_eval)?;
    let smooth = evaluate(model, &data.smooth_eval)?;
    Ok(EvalAccuracy {
        dense: dense.dense,
        smooth: smooth.smooth,
        n_dense: dense.n_dense,
        n_smooth: smooth.n_smooth,
    })
}

fn distill_arm(
    cfg: &ExperimentConfig,
    seed: u64,
    alignment: Alignment,
    teacher: &ToyModel,
    data: &SeedData,
) -> Result<DistillOutcome, HarnessError> {
    let student = ToyModel::hybridize(teacher, seed)?;
    let plan = DistillPlan {
        alignment,
        budget: cfg.budget.clone(),
        optim: cfg.optim.clone(),
        seed,
    };
    Ok(distill(teacher, &student, &data.train, &plan, None)?)
}

fn stage_mean_loss(outcome: &DistillOutcome) -> [Option<f64>; 3] {
    let mut out = [None; 3];
    for (k, slot) in out.iter_mut().enumerate() {
        let losses: Vec<f64> = outcome
            .logs
            .iter()
            .filter(|l| l.stage as usize == k + 1)
            .map(|l| l.loss)
            .collect();
        if !losses.is_empty() {
            *slot = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
    }
    out
}

fn now() -> Option<u64> {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

fn commit() -> Option<String> {
    std::env::var("HEED_COMMIT").ok().filter(|s| !s.is_empty())
}

/// Trains one condition on one seed, evaluates it and runs the diagnostics.
pub fn run_condition(
    cfg: &ExperimentConfig,
    seed: u64,
    condition: Condition,
    teacher: &ToyModel,
    teacher_report: &TeacherReport,
    data: &SeedData,
) -> Result<RunArtifacts, HarnessError> {
    let alignment = Alignment::for_condition(condition, cfg.density.tau, cfg.density.beta);
    let outcome = distill_arm(cfg, seed, alignment, teacher, data)?;
    let student = &outcome.student;
    let accuracy = eval_accuracy(student, data)?;
    let diagnostics = diagnose(cfg, seed, teacher, student, &data.diagnostic)?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION.into(),
        kind: "run".into(),
        condition,
        seed,
        config_hash: cfg.hash(),
        generated_at: now(),
        commit: commit(),
        config: cfg.clone(),
        teacher: TeacherSummary {
            training: teacher_report.clone(),
            param_hash: teacher.param_hash(|_| true),
        },
        training: TrainingSummary {
            stage_steps: outcome.stage_steps,
            stage_tokens: outcome.stage_tokens,
            stage_mean_loss: stage_mean_loss(&outcome),
            final_loss: outcome.logs.last().map(|l| l.loss),
            student_hash: student.param_hash(|_| true),
            frozen_hash: student.frozen_hash(),
        },
        accuracy,
        diagnostics,
    };
    Ok(RunArtifacts { report, outcome })
}

/// Drift concentration, masking importance, token regression and the
/// density/gradient rank agreement on the diagnostic slice.
pub fn diagnose(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &ToyModel,
    student: &ToyModel,
    samples: &[SynthSample],
) -> Result<RunDiagnostics, HarnessError> {
    let records = token_records(
        teacher,
        student,
        samples,
        cfg.density.beta,
        cfg.data.mask_importance,
    )?;

    // visual positions, drift averaged over taps
    let mut per_pos: BTreeMap<(u64, usize), (f64, f64, usize, Option<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.token_type == TokenType::Visual) {
        let e = per_pos.entry((r.image_id, r.position)).or_insert((
            r.density,
            0.0,
            0,
            r.mask_importance,
        ));
        e.1 += r.drift;
        e.2 += 1;
    }
    let density: Vec<f64> = per_pos.values().map(|e| e.0).collect();
    let drift: Vec<f64> = per_pos.values().map(|e| e.1 / e.2 as f64).collect();
    let drift_deciles = decile_summary(&density, &drift)?;
    let mask_deciles = if cfg.data.mask_importance {
        let imp: Vec<f64> = per_pos.values().map(|e| e.3.unwrap_or(0.0)).collect();
        Some(decile_summary(&density, &imp)?)
    } else {
        None
    };

    let regression = regress_records(
        &records,
        cfg.data.bootstrap_resamples,
        cfg.data.alpha,
        seed.wrapping_mul(0x1_0000_0001) ^ 0x5EED,
    )?;

    let nv = teacher.config.visual_len();
    let fields = position_sensitivity_batch(teacher, samples)?;
    let groups = samples
        .iter()
        .zip(&fields)
        .map(|(s, f)| {
            let rho = patch_density(&s.grid)
                .map_err(crate::model::ModelError::from)?
                .rho;
            let g = f.layer_sum()[..nv].to_vec();
            Ok((rho, g))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let density_gradient_spearman = mean_per_image_spearman(&groups)?;

    Ok(RunDiagnostics {
        n_samples: samples.len(),
        drift_deciles,
        mask_deciles,
        regression,
        density_gradient_spearman,
        reference: ReferenceValues::default(),
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn context(what: String, e: HarnessError) -> HarnessError {
    HarnessError::Run {
        context: what,
        source: Box::new(e),
    }
}

/// Runs every (seed, condition) pair. A failed run is recorded and the rest
/// continue. With `out_dir`, each report, each student checkpoint, each
/// teacher checkpoint and the aggregate are written there.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    teachers: &mut Teachers,
    out_dir: Option<&Path>,
) -> Result<(Aggregate, Vec<RunReport>), HarnessError> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut reports = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let failed = |runs: &mut Vec<RunSummary>, c: Condition, e: &HarnessError| {
            runs.push(RunSummary {
                condition: c,
                seed,
                ok: false,
                error: Some(e.chain()),
                dense_accuracy: None,
                smooth_accuracy: None,
                drift_ratio: None,
            })
        };
        let (teacher, teacher_report) = match teachers.get(cfg, seed) {
            Ok((t, r)) => (t.clone(), r.clone()),
            Err(e) => {
                let e = context(format!("teacher for seed {seed}"), e);
                cfg.conditions
                    .iter()
                    .for_each(|&c| failed(&mut runs, c, &e));
                continue;
            }
        };
        if let Some(dir) = out_dir {
            checkpoint::save(&teacher, &dir.join(format!("teacher_seed{seed}.ckpt")))?;
        }
        let data = SeedData::new(cfg, seed);
        for &c in &cfg.conditions {
            match run_condition(cfg, seed, c, &teacher, &teacher_report, &data) {
                Ok(art) => {
                    if let Some(dir) = out_dir {
                        checkpoint::save(
                            &art.outcome.student,
                            &dir.join(format!("student_{c}_seed{seed}.ckpt")),
                        )?;
                        write_json(&dir.join(format!("run_{c}_seed{seed}.json")), &art.report)?;
                    }
                    let r = art.report;
                    runs.push(RunSummary {
                        condition: c,
                        seed,
                        ok: true,
                        error: None,
                        dense_accuracy: r.metric("dense_accuracy"),
                        smooth_accuracy: r.metric("smooth_accuracy"),
                        drift_ratio: r.metric("drift_ratio"),
                    });
                    reports.push(r);
                }
                Err(e) => failed(&mut runs, c, &context(format!("{c} seed {seed}"), e)),
            }
        }
    }
    let comparisons = if reports.len() >= 2 {
        compare_conditions(&reports)?
    } else {
        Vec::new()
    };
    let aggregate = Aggregate {
        schema_version: SCHEMA_VERSION.into(),
        kind: "aggregate".into(),
        config_hash: cfg.hash(),
        generated_at: now(),
        runs,
        comparisons,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("aggregate.json"), &aggregate)?;
    }
    Ok((aggregate, reports))
}

/// Density-targeted versus random top-k boosting, one curve per control seed.
/// Arms within a seed train in parallel.
pub fn run_control(
    cfg: &ExperimentConfig,
    teachers: &mut Teachers,
    out_dir: Option<&Path>,
) -> Result<ControlReport, HarnessError> {
    cfg.validate()?;
    let c = &cfg.control;
    if c.random_seeds.is_empty() || c.k_percent.is_empty() {
        return Err(HarnessError::NothingToRun);
    }
    let mut curves = Vec::new();
    for seed in cfg.control_seeds() {
        let (teacher, _) = teachers.get(cfg, seed)?.clone();
        let data = SeedData::new(cfg, seed);
        // (k index, None = density arm / Some(i) = random arm i)
        let mut arms: Vec<(usize, Option<usize>)> = Vec::new();
        for (ki, &k) in c.k_percent.iter().enumerate() {
            arms.push((ki, None));
            if k > 0.0 {
                arms.extend((0..c.random_seeds.len()).map(|i| (ki, Some(i))));
            }
        }
        let results = arms
            .par_iter()
            .map(|&(ki, arm)| {
                let mode = match arm {
                    None => MaskMode::Density,
                    Some(i) => MaskMode::Random(c.random_seeds[i]),
                };
                let alignment = Alignment::Mask {
                    k_percent: c.k_percent[ki],
                    boost: c.boost,
                    mode,
                };
                let out = distill_arm(cfg, seed, alignment, &teacher, &data).map_err(|e| {
                    context(
                        format!("control seed {seed} k {} arm {arm:?}", c.k_percent[ki]),
                        e,
                    )
                })?;
                Ok(evaluate(&out.student, &data.dense_eval)?.dense)
            })
            .collect::<Result<Vec<f64>, HarnessError>>()?;
        let mut rows = Vec::new();
        for (ki, &k) in c.k_percent.iter().enumerate() {
            let acc =
                |a: Option<usize>| results[arms.iter().position(|x| *x == (ki, a)).expect("arm")];
            let density = acc(None);
            let shared_run = k == 0.0;
            let random: Vec<f64> = if shared_run {
                vec![density; c.random_seeds.len()]
            } else {
                (0..c.random_seeds.len()).map(|i| acc(Some(i))).collect()
            };
            let spread = paired_stats(&random).expect("random arms");
            let deltas: Vec<f64> = random.iter().map(|r| density - r).collect();
            rows.push(ControlRow {
                k_percent: k,
                density,
                random_mean: spread.mean,
                random_sd: spread.sd,
                paired: paired_stats(&deltas),
                random,
                shared_run,
            });
        }
        curves.push(ControlCurve {
            seed,
            random_seeds: c.random_seeds.clone(),
            rows,
        });
    }
    let report = ControlReport {
        schema_version: SCHEMA_VERSION.into(),
        kind: "control".into(),
        config_hash: cfg.hash(),
        generated_at: now(),
        boost: c.boost,
        curves,
        reference: ReferenceControl::default(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        write_json(&dir.join("control.json"), &report)?;
    }
    Ok(report)
}
