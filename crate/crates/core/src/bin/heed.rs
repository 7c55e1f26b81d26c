use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use heed::cache::{decode_cache, encode_cache, CacheEntry, CacheError};
use heed::density::{normalize_density, patch_density};
use heed::diagnostics::table::write_tokens;
use heed::diagnostics::token_records;
use heed::harness::{
    compare_conditions, comparison_table, diagnose, run_condition, run_control, run_experiment,
    seed_toy, write_json, DiagnosticsReport, ExperimentConfig, HarnessError, RunReport, SeedData,
    Teachers, SCHEMA_VERSION,
};
use heed::model::checkpoint::{self, CheckpointError};
use heed::model::train::{build_teacher, Condition};
use heed::model::ToyModel;

#[derive(Parser)]
#[command(
    name = "heed",
    version,
    about = "Density-weighted residual alignment on a toy hybrid"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill one condition on one seed; writes the run report and checkpoints into OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        condition: Condition,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnostics of a student checkpoint against its teacher.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Diagnostic slice settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also dump the per-token table as TSV.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Density-targeted versus random masking sweep; writes control.json into OUT.
    Control {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every (seed, condition) of a config plus the aggregate; OUT defaults to the config's output.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the masking sweep afterwards.
        #[arg(long)]
        with_control: bool,
    },
    /// Density cache files.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Paired C4-C3 and C4-C1 deltas over run reports of one config.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Write the comparisons as JSON as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Build a cache from a TSV of normalized densities, or from a config's training set.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the training set when IN is a .toml config; defaults to its first seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump a cache as TSV; `-` writes to stdout.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One cache entry per line: id, count, comma-separated normalized densities.
#[derive(Serialize, Deserialize)]
struct CacheRow {
    sample_id: u64,
    n_positions: u32,
    rho_tilde: String,
}

fn load_model(path: &Path) -> Result<ToyModel> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(config: &Path, condition: Condition, seed: u64, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (teacher, report) = build_teacher(&seed_toy(&cfg, seed), &cfg.teacher)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = SeedData::new(&cfg, seed);
    let art = run_condition(&cfg, seed, condition, &teacher, &report, &data)?;
    checkpoint::save(&teacher, &out.join(format!("teacher_seed{seed}.ckpt")))?;
    checkpoint::save(
        &art.outcome.student,
        &out.join(format!("student_{condition}_seed{seed}.ckpt")),
    )?;
    let path = out.join(format!("run_{condition}_seed{seed}.json"));
    write_json(&path, &art.report)?;
    println!("{}", path.display());
    Ok(())
}

fn diagnose_cmd(
    student: &Path,
    teacher: &Path,
    out: &Path,
    config: Option<&Path>,
    tokens: Option<&Path>,
) -> Result<()> {
    let s = load_model(student)?;
    let t = load_model(teacher)?;
    let seed = t.config.seed;
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            toy: t.config.clone(),
            ..ExperimentConfig::new(vec![Condition::C4], vec![seed])
        },
    };
    if seed_toy(&cfg, seed) != t.config || s.config != t.config {
        bail!("student, teacher and config disagree on the model shape");
    }
    let data = SeedData::new(&cfg, seed);
    let diagnostics = diagnose(&cfg, seed, &t, &s, &data.diagnostic)?;
    if let Some(p) = tokens {
        let recs = token_records(
            &t,
            &s,
            &data.diagnostic,
            cfg.density.beta,
            cfg.data.mask_importance,
        )?;
        let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_tokens(f, &recs)?;
    }
    let report = DiagnosticsReport {
        schema_version: SCHEMA_VERSION.into(),
        kind: "diagnostics".into(),
        config_hash: cfg.hash(),
        generated_at: None,
        seed,
        teacher_hash: t.param_hash(|_| true),
        student_hash: s.param_hash(|_| true),
        diagnostics,
    };
    write_json(out, &report)?;
    Ok(())
}

fn cache_encode(input: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let entries = if input.extension().is_some_and(|e| e == "toml") {
        let cfg = ExperimentConfig::load(input)?;
        let seed = seed.unwrap_or(cfg.seeds[0]);
        let train = SeedData::new(&cfg, seed).train;
        train
            .iter()
            .map(|s| {
                Ok(CacheEntry::from_rho_tilde(
                    s.id,
                    &normalize_density(patch_density(&s.grid)?).rho_tilde,
                )?)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut r = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(input)
            .with_context(|| format!("reading {}", input.display()))?;
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let row: CacheRow = row?;
            let values = row
                .rho_tilde
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| anyhow!("sample {}: {e}", row.sample_id))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != row.n_positions as usize {
                bail!(
                    "sample {} lists {} values, declares {}",
                    row.sample_id,
                    values.len(),
                    row.n_positions
                );
            }
            entries.push(CacheEntry::from_rho_tilde(row.sample_id, &values)?);
        }
        entries
    };
    let bytes = encode_cache(&entries)?;
    std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    println!("{} samples, {} bytes", entries.len(), bytes.len());
    Ok(())
}

fn cache_inspect(input: &Path, out: &Path) -> Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let entries = decode_cache(&bytes)?;
    let sink: Box<dyn Write> = if out == Path::new("-") {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?)
    };
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(sink);
    for e in &entries {
        let values: Vec<String> = e.dequantized().iter().map(|v| format!("{v}")).collect();
        w.serialize(CacheRow {
            sample_id: e.sample_id,
            n_positions: e.n_positions(),
            rho_tilde: values.join(","),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunReport>(&text)
                .with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let comparisons = compare_conditions(&reports)?;
    print!("{}", comparison_table(&comparisons));
    if let Some(p) = out {
        write_json(p, &comparisons)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            condition,
            seed,
            out,
        } => train(&config, condition, seed, &out),
        Command::Diagnose {
            checkpoint,
            teacher,
            out,
            config,
            tokens,
        } => diagnose_cmd(
            &checkpoint,
            &teacher,
            &out,
            config.as_deref(),
            tokens.as_deref(),
        ),
        Command::Control { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            run_control(&cfg, &mut Teachers::new(), Some(&out))?;
            println!("{}", out.join("control.json").display());
            Ok(())
        }
        Command::Experiment {
            config,
            out,
            with_control,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let mut teachers = Teachers::new();
            let (agg, _) = run_experiment(&cfg, &mut teachers, Some(&out))?;
            if with_control {
                run_control(&cfg, &mut teachers, Some(&out))?;
            }
            print!("{}", comparison_table(&agg.comparisons));
            let failed = agg.runs.iter().filter(|r| !r.ok).count();
            if failed > 0 {
                bail!(
                    "{failed} of {} runs failed; see {}",
                    agg.runs.len(),
                    out.join("aggregate.json").display()
                );
            }
            Ok(())
        }
        Command::Cache(CacheCommand::Encode { input, out, seed }) => {
            cache_encode(&input, &out, seed)
        }
        Command::Cache(CacheCommand::Inspect { input, out }) => cache_inspect(&input, &out),
        Command::Compare { reports, out } => compare(&reports, out.as_deref()),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return h.kind();
        }
        if cause.is::<CacheError>() {
            return "cache";
        }
        if cause.is::<CheckpointError>() {
            return "checkpoint";
        }
        if cause.is::<heed::model::ModelError>() {
            return "model";
        }
        if cause.is::<csv::Error>() {
            return "format";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = serde_json::json!({"error": {"kind": "usage", "message": e.to_string().trim_end()}});
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
