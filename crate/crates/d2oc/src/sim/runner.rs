//! Monte Carlo batch execution of scenarios.
//!
//! Each run is fully determined by `(config, base_seed + run_index)`:
//! every agent draws from its own counter-mode RNG stream, runs execute
//! the coordinator cycle for the mission length, and the squared
//! 2-Wasserstein distance between the accumulated empirical output
//! distribution and the target is evaluated on the configured stride
//! (exactly, or on a seeded subsample once the support exceeds the cap).
//! Batches aggregate per-step means and population standard deviations
//! across runs; with the `parallel` feature runs execute data-parallel
//! and are collected in run order, so outputs are byte-identical either
//! way.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coordinator::{
    run_cycle, AgentRuntime, ControllerKind, CycleConfig, EstimatorKind, SampleField,
    SelectionMode,
};
use crate::error::{Error, Result};
use crate::lti::{GaussianFactor, SteadyStateKalman};
use crate::mpc::InputConstraint;
use crate::sim::config::ScenarioConfig;
use crate::sim::diagnostics::{convergence_diagnostics, DecayFit, RESIDUAL_FRACTION_THRESHOLD};
use crate::sim::metrics::{BatchBand, MetricsLog, RunSummary, StepRecord};
use crate::transport::{wasserstein2, DiscreteMeasure, EmpiricalDistribution};

/// Metrics of one completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub run: usize,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    /// `(step, w2sq)` at the evaluation steps.
    pub w2_series: Vec<(usize, f64)>,
}

/// A run either completes or is recorded with its failure step and cause.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Completed(RunLog),
    Failed { run: usize, step: usize, cause: String },
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub outcomes: Vec<RunOutcome>,
    pub bands: Vec<BatchBand>,
    /// Decay fit of the batch-mean series, when enough evaluations exist.
    pub mean_fit: Option<DecayFit>,
}

impl BatchResult {
    pub fn completed_runs(&self) -> impl Iterator<Item = &RunLog> {
        self.outcomes.iter().filter_map(|o| match o {
            RunOutcome::Completed(log) => Some(log),
            RunOutcome::Failed { .. } => None,
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = (usize, usize, &str)> {
        self.outcomes.iter().filter_map(|o| match o {
            RunOutcome::Failed { run, step, cause } => Some((*run, *step, cause.as_str())),
            RunOutcome::Completed(_) => None,
        })
    }

    /// Full metrics log across completed runs.
    pub fn to_metrics_log(&self) -> MetricsLog {
        let mut log = MetricsLog::default();
        for run in self.completed_runs() {
            log.records.extend(run.records.iter().cloned());
            log.run_summaries.push(run.summary.clone());
        }
        log.bands = self.bands.clone();
        log
    }
}

struct RunSetup {
    agents: Vec<AgentRuntime>,
    field: SampleField,
    empirical: EmpiricalDistribution,
    target: DiscreteMeasure,
    cycle: CycleConfig,
}

fn constraint_from_config(config: &ScenarioConfig) -> Result<InputConstraint> {
    match config.scenario.constraint.as_str() {
        "none" => Ok(InputConstraint::None),
        "box" => {
            let bounds = config.input_bounds.as_ref().ok_or_else(|| {
                Error::InvalidArgument("box constraint needs input_bounds".into())
            })?;
            let lo = bounds.u_min.clone().ok_or_else(|| {
                Error::InvalidArgument("box constraint needs input_bounds.u_min".into())
            })?;
            let hi = bounds.u_max.clone().ok_or_else(|| {
                Error::InvalidArgument("box constraint needs input_bounds.u_max".into())
            })?;
            Ok(InputConstraint::Box {
                u_min: DVector::from_vec(lo),
                u_max: DVector::from_vec(hi),
            })
        }
        "ball" => {
            let radius = config
                .input_bounds
                .as_ref()
                .and_then(|b| b.ball_radius)
                .ok_or_else(|| {
                    Error::InvalidArgument("ball constraint needs input_bounds.ball_radius".into())
                })?;
            Ok(InputConstraint::Ball { radius })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown constraint '{other}'"
        ))),
    }
}

/// Builds the per-run world. Draw order per agent stream: initial-state
/// perturbation, then the step-0 measurement noise, then per cycle the
/// process and measurement noise inside `simulate_step`.
fn setup_run(config: &ScenarioConfig, run_index: usize) -> Result<RunSetup> {
    let scenario = &config.scenario;
    let run_seed = scenario.base_seed.wrapping_add(run_index as u64);
    let samples = config.target.resolve()?;
    let target = DiscreteMeasure::uniform(samples.clone())?;

    let constraint = constraint_from_config(config)?;
    let estimator = match scenario.estimator.as_str() {
        "oracle" => EstimatorKind::OracleMean,
        "kalman" => EstimatorKind::Kalman,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown estimator '{other}'"
            )))
        }
    };
    let controller = match scenario.controller.as_str() {
        "density" => ControllerKind::DensityMpc,
        "greedy" => {
            let baseline = config.baseline.clone().unwrap_or(crate::sim::config::BaselineSection {
                kp: 1.0,
                kd: 0.5,
            });
            ControllerKind::GreedyTracker {
                kp: baseline.kp,
                kd: baseline.kd,
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown controller '{other}'"
            )))
        }
    };
    let selection = match scenario.selection.as_str() {
        "hard" => SelectionMode::Hard,
        "soft" => SelectionMode::Soft {
            lambda: scenario.soft_lambda,
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown selection mode '{other}'"
            )))
        }
    };

    let mut agents = Vec::with_capacity(config.agents.len());
    let mut initial_outputs = Vec::with_capacity(config.agents.len());
    let mut input_dim = 0;
    for (i, section) in config.agents.iter().enumerate() {
        let model = section.build_model()?;
        input_dim = model.input_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        rng.set_stream(i as u64 + 1);

        let mean = section.initial_mean_vector();
        let perturbation = section.init_perturbation.to_matrix(model.state_dim())?;
        let factor = GaussianFactor::new(&perturbation, "initial perturbation")?;
        let x0 = &mean + factor.sample(&mut rng);
        let v0 = GaussianFactor::new(model.sigma_v(), "measurement covariance")?.sample(&mut rng);
        let y0 = model.c() * &x0 + v0;

        let kalman = match estimator {
            EstimatorKind::Kalman => Some(SteadyStateKalman::design(&model)?),
            EstimatorKind::OracleMean => None,
        };
        let mu0 = match estimator {
            EstimatorKind::OracleMean => x0.clone(),
            EstimatorKind::Kalman => mean.clone(),
        };
        initial_outputs.push(y0.clone());
        agents.push(AgentRuntime::new(
            model,
            scenario.horizon,
            x0,
            mu0,
            y0,
            rng,
            kalman,
        )?);
    }

    let field = SampleField::new(samples, agents.len())?;
    let empirical = EmpiricalDistribution::new(initial_outputs)?;
    let mh = input_dim * scenario.horizon;
    let cycle = CycleConfig {
        horizon: scenario.horizon,
        alpha: 1.0 / scenario.mission_steps as f64,
        knn: scenario.k_nearest,
        constraint,
        r_mat: DMatrix::identity(mh, mh) * scenario.r_scale,
        selection,
        comm_range: scenario.comm_range,
        controller,
        estimator,
    };
    Ok(RunSetup {
        agents,
        field,
        empirical,
        target,
        cycle,
    })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Executes one run; deterministic in `(config, base_seed + run_index)`.
pub fn run_scenario(config: &ScenarioConfig, run_index: usize) -> Result<RunLog> {
    let scenario = &config.scenario;
    let run_seed = scenario.base_seed.wrapping_add(run_index as u64);
    let mut world = setup_run(config, run_index)?;
    let k_max = scenario.mission_steps;
    let stride = scenario.w2_eval_stride;

    let wrap = |step: usize| {
        move |e: Error| Error::RunFailed {
            run: run_index,
            step,
            cause: e.to_string(),
        }
    };

    let mut records = Vec::with_capacity(k_max + 1);
    let mut w2_series = Vec::new();

    let evaluate = |empirical: &EmpiricalDistribution, step: usize| -> Result<(f64, usize)> {
        // Seed the subsample from (run, step) so re-evaluations agree.
        let subsample_seed = run_seed ^ ((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (measure, support) = empirical
            .subsampled_measure(scenario.w2_subsample_cap, subsample_seed)
            .map_err(wrap(step))?;
        let w = wasserstein2(&measure, &world.target).map_err(wrap(step))?;
        Ok((w * w, support))
    };

    // Step 0: initial outputs only.
    let (w2sq0, support0) = evaluate(&world.empirical, 0)?;
    w2_series.push((0, w2sq0));
    records.push(StepRecord {
        step: 0,
        run: run_index,
        w2sq: Some(w2sq0),
        w2_support: Some(support0),
        comm_edges: 0,
        proj_dist_mean: 0.0,
        obj_mean: 0.0,
        const_term: 0.0,
        input_norm_mean: 0.0,
    });

    for step in 1..=k_max {
        let event = run_cycle(&mut world.agents, &mut world.field, &world.cycle, step)
            .map_err(wrap(step))?;
        world.empirical.update(&event.outputs).map_err(wrap(step))?;
        debug_assert_eq!(world.empirical.len(), (step + 1) * world.agents.len());

        let (w2sq, support) = if step % stride == 0 || step == k_max {
            let (w, s) = evaluate(&world.empirical, step)?;
            w2_series.push((step, w));
            (Some(w), Some(s))
        } else {
            (None, None)
        };
        records.push(StepRecord {
            step,
            run: run_index,
            w2sq,
            w2_support: support,
            comm_edges: event.comm_edges.len(),
            proj_dist_mean: mean(&event.proj_distances),
            obj_mean: mean(&event.objectives),
            const_term: mean(&event.const_terms),
            input_norm_mean: mean(&event.input_norms),
        });
    }

    let final_w2sq = w2_series.last().map(|(_, w)| *w).unwrap_or(f64::NAN);
    let fit = if w2_series.len() >= 10 {
        Some(convergence_diagnostics(&w2_series, RESIDUAL_FRACTION_THRESHOLD).map_err(wrap(k_max))?)
    } else {
        None
    };
    Ok(RunLog {
        run: run_index,
        records,
        summary: RunSummary {
            run: run_index,
            final_w2sq,
            fit,
        },
        w2_series,
    })
}

fn aggregate(config: &ScenarioConfig, outcomes: Vec<RunOutcome>) -> BatchResult {
    let completed: Vec<&RunLog> = outcomes
        .iter()
        .filter_map(|o| match o {
            RunOutcome::Completed(log) => Some(log),
            RunOutcome::Failed { .. } => None,
        })
        .collect();
    let mut bands = Vec::new();
    if let Some(first) = completed.first() {
        for (idx, (step, _)) in first.w2_series.iter().enumerate() {
            let values: Vec<f64> = completed
                .iter()
                .filter_map(|log| log.w2_series.get(idx).map(|(_, w)| *w))
                .collect();
            if values.len() != completed.len() {
                continue;
            }
            let m = mean(&values);
            let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
            bands.push(BatchBand {
                step: *step,
                mean_w2sq: m,
                std_w2sq: var.sqrt(),
            });
        }
    }
    let mean_series: Vec<(usize, f64)> = bands.iter().map(|b| (b.step, b.mean_w2sq)).collect();
    let mean_fit = if mean_series.len() >= 10 {
        convergence_diagnostics(&mean_series, RESIDUAL_FRACTION_THRESHOLD).ok()
    } else {
        None
    };
    let _ = config;
    BatchResult {
        outcomes,
        bands,
        mean_fit,
    }
}

fn outcome_for(config: &ScenarioConfig, run_index: usize) -> RunOutcome {
    match run_scenario(config, run_index) {
        Ok(log) => RunOutcome::Completed(log),
        Err(Error::RunFailed { run, step, cause }) => RunOutcome::Failed { run, step, cause },
        Err(other) => RunOutcome::Failed {
            run: run_index,
            step: 0,
            cause: other.to_string(),
        },
    }
}

/// Executes all configured runs sequentially.
pub fn run_batch_sequential(config: &ScenarioConfig) -> BatchResult {
    let outcomes: Vec<RunOutcome> = (0..config.scenario.runs)
        .map(|i| outcome_for(config, i))
        .collect();
    aggregate(config, outcomes)
}

/// Executes all configured runs, data-parallel over runs when the
/// `parallel` feature is enabled. Results are identical to the
/// sequential path.
#[cfg(feature = "parallel")]
pub fn run_batch(config: &ScenarioConfig) -> BatchResult {
    use rayon::prelude::*;
    let outcomes: Vec<RunOutcome> = (0..config.scenario.runs)
        .into_par_iter()
        .map(|i| outcome_for(config, i))
        .collect();
    aggregate(config, outcomes)
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(config: &ScenarioConfig) -> BatchResult {
    run_batch_sequential(config)
}
