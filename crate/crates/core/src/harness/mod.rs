//! Config-driven experiment runs, the masking control, and JSON reports.

mod report;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::density::{DEFAULT_BETA, DEFAULT_TAU};
use crate::losses::{CONTROL_K_PERCENT, DEFAULT_MASK_BOOST};
use crate::model::train::{Condition, OptimConfig, StageBudget, TeacherTraining};
use crate::model::{ModelError, ToyConfig};

pub use report::{
    compare_conditions, comparison_table, paired_stats, strip_volatile, Aggregate, Comparison,
    ControlCurve, ControlReport, ControlRow, DiagnosticsReport, EvalAccuracy, PairedStats,
    ReferenceControl, ReferenceValues, RunDiagnostics, RunReport, RunSummary, SeedDelta,
    TeacherSummary, TrainingSummary, COMPARISON_METRICS, COMPARISON_PAIRS, SCHEMA_VERSION,
};
pub use run::{
    diagnose, run_condition, run_control, run_experiment, seed_toy, teacher_for_seed, write_json,
    RunArtifacts, SeedData, Teachers,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("nothing to run")]
    NothingToRun,
    #[error("config hash mismatch: {0} vs {1}")]
    HashMismatch(String, String),
    #[error("{context}")]
    Run {
        context: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] crate::diagnostics::StatsError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::checkpoint::CheckpointError),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// This error and its causes, joined with `": "`.
    pub fn chain(&self) -> String {
        let mut out = self.to_string();
        let mut cur: Option<&dyn std::error::Error> = std::error::Error::source(self);
        while let Some(e) = cur {
            out.push_str(": ");
            out.push_str(&e.to_string());
            cur = e.source();
        }
        out
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) | Self::NothingToRun | Self::Toml(_) => "config",
            Self::HashMismatch(..) => "hash_mismatch",
            Self::Run { source, .. } => source.kind(),
            Self::Model(ModelError::CompetenceGate { .. }) => "competence_gate",
            Self::Model(_) => "model",
            Self::Stats(_) => "stats",
            Self::Checkpoint(_) => "checkpoint",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityParams {
    pub tau: f64,
    pub beta: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlParams {
    /// Percent of visual positions boosted; 0 is the shared baseline.
    pub k_percent: Vec<f64>,
    pub boost: f64,
    /// One random-mask arm per seed.
    pub random_seeds: Vec<u64>,
    /// Experiment seeds (teachers) the control runs on; empty means the first seed.
    pub seeds: Vec<u64>,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            k_percent: CONTROL_K_PERCENT.to_vec(),
            boost: DEFAULT_MASK_BOOST,
            random_seeds: vec![101, 102, 103],
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataParams {
    pub train_samples: usize,
    /// Held-out samples per task.
    pub eval_samples: usize,
    /// Dense-task samples the diagnostics run on.
    pub diagnostic_samples: usize,
    pub bootstrap_resamples: usize,
    pub alpha: f64,
    /// Also measure per-position masking importance (one teacher pass per position).
    pub mask_importance: bool,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            train_samples: 2048,
            eval_samples: 512,
            diagnostic_samples: 64,
            bootstrap_resamples: 1000,
            alpha: 0.05,
            mask_importance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub teacher: TeacherTraining,
    #[serde(default)]
    pub budget: StageBudget,
    #[serde(default)]
    pub optim: OptimConfig,
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub density: DensityParams,
    #[serde(default)]
    pub control: ControlParams,
    #[serde(default)]
    pub data: DataParams,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("reports")
}

impl ExperimentConfig {
    /// Default settings for the given conditions and seeds.
    pub fn new(conditions: Vec<Condition>, seeds: Vec<u64>) -> Self {
        Self {
            toy: ToyConfig::default(),
            teacher: TeacherTraining::default(),
            budget: StageBudget::default(),
            optim: OptimConfig::default(),
            conditions,
            seeds,
            density: DensityParams::default(),
            control: ControlParams::default(),
            data: DataParams::default(),
            output: default_output(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every value a run depends on.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.conditions.is_empty() {
            return Err(HarnessError::NothingToRun);
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(c) = self.conditions.iter().find(|c| !seen.insert(**c)) {
            return bad(format!("condition {c} listed twice"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seed {s} listed twice"));
        }
        if let Some(s) = self.seeds.iter().find(|s| **s >= 1 << 28) {
            return bad(format!("seed {s} must be below 2^28"));
        }
        self.toy.validate()?;
        self.budget.validate()?;
        let t = &self.teacher;
        if t.batch_size == 0 || t.max_steps == 0 || t.eval_every == 0 || t.eval_samples < 2 {
            return bad(
                "teacher batch size, steps, eval interval and eval samples must be positive".into(),
            );
        }
        if !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.gate) {
            return bad(format!(
                "teacher lr {} / gate {} out of range",
                t.lr, t.gate
            ));
        }
        let o = &self.optim;
        if o.batch_size == 0 || !(o.peak_lr > 0.0) || !(o.grad_clip > 0.0) || !(o.eps > 0.0) {
            return bad("optimizer batch size, lr, eps and clip must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!(
                "betas ({}, {}) must lie in [0, 1)",
                o.beta1, o.beta2
            ));
        }
        if !(0.0..=1.0).contains(&o.warmup_frac)
            || !(0.0..=1.0).contains(&o.final_lr_frac)
            || o.weight_decay < 0.0
        {
            return bad(
                "warmup and final lr fractions must lie in [0, 1], weight decay >= 0".into(),
            );
        }
        if !(o.lambda_kl >= 0.0 && o.lambda_ce >= 0.0) || o.lambda_kl + o.lambda_ce == 0.0 {
            return bad("loss weights must be non-negative and not both zero".into());
        }
        let tokens_per_batch = (o.batch_size * self.toy.seq_len()) as u64;
        if self.budget.total_tokens < tokens_per_batch {
            return bad(format!(
                "budget of {} tokens is below one batch ({tokens_per_batch})",
                self.budget.total_tokens
            ));
        }
        if !(self.density.tau > 0.0 && self.density.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.density.tau));
        }
        if !(self.density.beta > 0.0 && self.density.beta.is_finite()) {
            return bad(format!("beta {} must be positive", self.density.beta));
        }
        let c = &self.control;
        if c.k_percent.iter().any(|k| !(0.0..=100.0).contains(k)) {
            return bad(format!(
                "control k values {:?} must lie in [0, 100]",
                c.k_percent
            ));
        }
        if !(c.boost > 0.0) {
            return bad(format!("control boost {} must be positive", c.boost));
        }
        if let Some(s) = c.seeds.iter().find(|s| !self.seeds.contains(s)) {
            return bad(format!("control seed {s} is not an experiment seed"));
        }
        let d = &self.data;
        if d.train_samples == 0 || d.eval_samples == 0 {
            return bad("train and eval sample counts must be positive".into());
        }
        if d.diagnostic_samples < 2 {
            return bad("need at least 2 diagnostic samples".into());
        }
        if d.bootstrap_resamples < 100 {
            return bad(format!(
                "bootstrap_resamples {} < 100",
                d.bootstrap_resamples
            ));
        }
        if !(d.alpha > 0.0 && d.alpha < 1.0) {
            return bad(format!("alpha {} must lie in (0, 1)", d.alpha));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Seeds the control experiment runs on.
    pub fn control_seeds(&self) -> Vec<u64> {
        if self.control.seeds.is_empty() {
            self.seeds.iter().take(1).copied().collect()
        } else {
            self.control.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
conditions = ["C3", "C4"]
seeds = [0, 1, 2]
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.conditions, vec![Condition::C3, Condition::C4]);
        assert_eq!(c.toy, ToyConfig::default());
        assert_eq!(c.control.k_percent, vec![0.0, 10.0, 25.0, 50.0]);
        assert_eq!(c.control_seeds(), vec![0]);
        assert_eq!(c.output, PathBuf::from("reports"));
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.toy.d_model = 16;
        c.optim.peak_lr = 3e-3;
        c.control.seeds = vec![1];
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.density.tau = 0.25;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(matches!(
            ExperimentConfig::from_toml("conditions = []\nseeds = [0]"),
            Err(HarnessError::NothingToRun)
        ));
        let cases = [
            "conditions = [\"C3\"]\nseeds = []",
            "conditions = [\"C3\", \"C3\"]\nseeds = [0]",
            "conditions = [\"C9\"]\nseeds = [0]",
            "conditions = [\"C3\"]\nseeds = [0]\nunknown = 1",
            "conditions = [\"C3\"]\nseeds = [0]\n[density]\ntau = 0.0",
            "conditions = [\"C3\"]\nseeds = [0]\n[budget]\nfractions = [0.5, 0.5, 0.5]",
            "conditions = [\"C3\"]\nseeds = [0]\n[toy]\nn_layers = 6",
            "conditions = [\"C3\"]\nseeds = [0]\n[control]\nk_percent = [120.0]",
            "conditions = [\"C3\"]\nseeds = [0]\n[control]\nseeds = [4]",
            "conditions = [\"C3\"]\nseeds = [0]\n[data]\nbootstrap_resamples = 10",
            "conditions = [\"C3\"]\nseeds = [0]\n[budget]\ntotal_tokens = 10",
        ];
        for text in cases {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
