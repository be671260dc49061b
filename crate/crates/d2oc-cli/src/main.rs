//! Batch-simulation CLI for density-driven optimal control scenarios.
//!
//! Exit codes: 0 success, 2 configuration validation failure, 1 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use d2oc::sim::{
    self, convergence_diagnostics, emit_metrics, load_metrics, run_batch, MetricsFormat,
    MetricsLog, RunOutcome, ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "d2oc", version, about = "Density-driven coverage control batch simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and report every violation.
    Validate { config: String },
    /// Execute a scenario batch and write metrics files.
    Run {
        config: String,
        /// Override the configured number of runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the configured base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $D2OC_OUT_DIR or ./d2oc-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the decay-to-a-floor model to a metrics file (.jsonl or .csv).
    Diagnose {
        metrics: String,
        /// Residual fraction below which the fit counts as consistent.
        #[arg(long, default_value_t = sim::RESIDUAL_FRACTION_THRESHOLD)]
        residual_threshold: f64,
    },
    /// Compare the final batch-mean squared distance of two metrics files.
    Compare { metrics_a: String, metrics_b: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run {
            config,
            runs,
            seed,
            out,
        } => run(&config, runs, seed, out),
        Command::Diagnose {
            metrics,
            residual_threshold,
        } => diagnose(&metrics, residual_threshold),
        Command::Compare { metrics_a, metrics_b } => compare(&metrics_a, &metrics_b),
    }
}

fn load_validated(path: &str) -> Result<ScenarioConfig, ExitCode> {
    match sim::load_config(path) {
        Ok(config) => Ok(config),
        Err(e @ d2oc::Error::ConfigInvalid(_)) | Err(e @ d2oc::Error::ConfigParse { .. }) => {
            eprintln!("{e}");
            Err(ExitCode::from(2))
        }
        Err(e) => {
            eprintln!("{e}");
            Err(ExitCode::from(1))
        }
    }
}

fn validate(path: &str) -> ExitCode {
    match load_validated(path) {
        Ok(config) => {
            println!(
                "ok: scenario '{}' with {} agent(s), {} target sample(s), {} run(s)",
                config.scenario.name,
                config.agents.len(),
                config.target.resolve().map(|p| p.len()).unwrap_or(0),
                config.scenario.runs,
            );
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn run(path: &str, runs: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut config = match load_validated(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(runs) = runs {
        if runs == 0 {
            eprintln!("--runs must be >= 1");
            return ExitCode::from(2);
        }
        config.scenario.runs = runs;
    }
    if let Some(seed) = seed {
        config.scenario.base_seed = seed;
    }
    let out_dir = out.unwrap_or_else(|| {
        std::env::var_os("D2OC_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("d2oc-out"))
    });
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("cannot create {}: {e}", out_dir.display());
        return ExitCode::from(1);
    }

    println!(
        "running '{}': {} run(s) of {} step(s), base seed {}",
        config.scenario.name,
        config.scenario.runs,
        config.scenario.mission_steps,
        config.scenario.base_seed
    );
    let started = std::time::Instant::now();
    let batch = run_batch(&config);
    let elapsed = started.elapsed();

    match write_outputs(&config, &batch, &out_dir) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("failed writing outputs: {e}");
            return ExitCode::from(1);
        }
    }

    if let (Some(first), Some(last)) = (batch.bands.first(), batch.bands.last()) {
        println!(
            "mean W2^2: {:.6} at step {} -> {:.6} at step {}",
            first.mean_w2sq, first.step, last.mean_w2sq, last.step
        );
    }
    if let Some(fit) = &batch.mean_fit {
        println!(
            "mean-series fit: floor {:.6}, c {:.6}, residual fraction {:.3}, consistent: {}",
            fit.floor, fit.c_hat, fit.residual_frac, fit.consistent
        );
    }
    println!("metrics written to {} ({:.1?})", out_dir.display(), elapsed);

    let mut failed = false;
    for (run, step, cause) in batch.failures() {
        failed = true;
        eprintln!("run {run} failed at step {step}: {cause}");
    }
    if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn write_outputs(
    config: &ScenarioConfig,
    batch: &d2oc::sim::BatchResult,
    out_dir: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    // The metadata header is the only timestamped output.
    let generated_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "generated_at_unix": generated_at,
        "scenario": config.scenario.name,
        "runs": config.scenario.runs,
        "base_seed": config.scenario.base_seed,
        "mission_steps": config.scenario.mission_steps,
    });
    std::fs::write(
        out_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;

    for outcome in &batch.outcomes {
        if let RunOutcome::Completed(log) = outcome {
            let per_run = MetricsLog {
                records: log.records.clone(),
                run_summaries: vec![log.summary.clone()],
                bands: Vec::new(),
            };
            let path = out_dir.join(format!("run_{:03}.jsonl", log.run));
            emit_metrics(&per_run, path.to_str().unwrap(), MetricsFormat::JsonLines)?;
        }
    }

    let full = batch.to_metrics_log();
    emit_metrics(
        &full,
        out_dir.join("summary.csv").to_str().unwrap(),
        MetricsFormat::CsvSummary,
    )?;

    let failures: Vec<_> = batch
        .failures()
        .map(|(run, step, cause)| serde_json::json!({"run": run, "step": step, "cause": cause}))
        .collect();
    let batch_json = serde_json::json!({
        "run_summaries": full.run_summaries,
        "bands": full.bands,
        "mean_fit": batch.mean_fit,
        "failures": failures,
    });
    std::fs::write(
        out_dir.join("batch.json"),
        serde_json::to_string_pretty(&batch_json)? + "\n",
    )?;
    Ok(())
}

/// Extracts a `(step, w2sq)` series from a metrics file: bands when
/// present, otherwise per-step means over the record lines.
fn series_from_metrics(path: &str) -> Result<Vec<(usize, f64)>, d2oc::Error> {
    let format = if path.ends_with(".csv") {
        MetricsFormat::CsvSummary
    } else {
        MetricsFormat::JsonLines
    };
    let log = load_metrics(path, format)?;
    if !log.bands.is_empty() {
        return Ok(log.bands.iter().map(|b| (b.step, b.mean_w2sq)).collect());
    }
    let mut by_step: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for record in &log.records {
        if let Some(w) = record.w2sq {
            let entry = by_step.entry(record.step).or_insert((0.0, 0));
            entry.0 += w;
            entry.1 += 1;
        }
    }
    Ok(by_step
        .into_iter()
        .map(|(step, (sum, count))| (step, sum / count as f64))
        .collect())
}

fn diagnose(path: &str, residual_threshold: f64) -> ExitCode {
    let series = match series_from_metrics(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match convergence_diagnostics(&series, residual_threshold) {
        Ok(fit) => {
            println!(
                "fit over {} evaluation(s): floor {:.6}, c {:.6}, residual fraction {:.4}",
                series.len(),
                fit.floor,
                fit.c_hat,
                fit.residual_frac
            );
            println!(
                "consistent with 1/k decay to a floor (threshold {residual_threshold}): {}",
                fit.consistent
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}

fn compare(path_a: &str, path_b: &str) -> ExitCode {
    let final_mean = |path: &str| -> Result<(usize, f64), d2oc::Error> {
        let series = series_from_metrics(path)?;
        series.last().copied().ok_or_else(|| {
            d2oc::Error::MetricsFormat(format!("{path}: no evaluations found"))
        })
    };
    match (final_mean(path_a), final_mean(path_b)) {
        (Ok((step_a, a)), Ok((step_b, b))) => {
            println!("{path_a}: final mean W2^2 {a:.6} at step {step_a}");
            println!("{path_b}: final mean W2^2 {b:.6} at step {step_b}");
            if a < b {
                println!("lower: {path_a} (by {:.6})", b - a);
            } else if b < a {
                println!("lower: {path_b} (by {:.6})", a - b);
            } else {
                println!("equal");
            }
            ExitCode::SUCCESS
        }
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
