//! Experiment orchestration: builds the model and schedule once, fans runs
//! out across seeds on a local thread pool, and writes CSV/SVG artifacts
//! plus a manifest.
//!
//! Determinism contract: every numeric output is a pure function of the
//! config (including its seed list). Runs are keyed by their seed through
//! the counter-based streams, so scheduling order cannot change any value,
//! and repeated invocations of the same config produce byte-identical CSV
//! and SVG bodies. Wall-clock times live only in `manifest.json`.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{manifold_proxy, nearest_component, track_loss};
use crate::error::{Error, Result};
use crate::guidance::{equivalent_omega_schedule, GuidanceMode, MATCHED_SCALE_PAIRS};
use crate::inverse_problem::{InverseParams, Measurement};
use crate::inversion::{ddim_invert, edit, roundtrip};
use crate::rng::{slot, RunKey};
use crate::schedule::{GridDirection, NoiseSchedule, TimestepGrid};
use crate::score::{Condition, GaussianMixture};
use crate::solver::{sample, Trajectory};
use crate::vecn;

use super::config::{ExperimentConfig, ExperimentKind};
use super::csv::{float_cell, write_atomic};
use super::svg::{LineChart, Series};

/// What a finished run wrote and how long it took. CSV bodies carry no
/// timestamps; all timing lives here.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub experiment: String,
    /// Artifact file names in the output directory, sorted.
    pub files: Vec<String>,
    /// Per-run wall-clock milliseconds, in run order.
    pub run_wall_ms: Vec<f64>,
    pub total_wall_ms: f64,
}

/// At most this many runs get their own polyline in overview charts.
const CHART_SERIES_CAP: usize = 8;

struct Artifact {
    name: String,
    bytes: Vec<u8>,
}

fn csv_artifact(name: &str, schema: &[String], rows: &[Vec<String>]) -> Result<Artifact> {
    let refs: Vec<&str> = schema.iter().map(|s| s.as_str()).collect();
    let body = super::csv::render_csv(&refs, rows)?;
    Ok(Artifact {
        name: name.to_string(),
        bytes: body.into_bytes(),
    })
}

fn chart_artifact(name: &str, chart: &LineChart) -> Result<Artifact> {
    Ok(Artifact {
        name: name.to_string(),
        bytes: chart.render()?.into_bytes(),
    })
}

fn owned_schema(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn state_columns(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|d| format!("{prefix}{d}")).collect()
}

/// Draws the deterministic starting sample for a seed from the prior under
/// the run's condition.
fn prior_sample(
    model: &GaussianMixture,
    condition: &Condition,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = RunKey::new(seed, 0).stream(slot::PRIOR);
    model.sample_prior(condition, &mut rng)
}

fn build_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("GLAB_THREADS") {
        let n: usize = raw.trim().parse().map_err(|_| {
            Error::Config(format!(
                "GLAB_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
        if n == 0 {
            return Err(Error::Config("GLAB_THREADS must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs every task on the pool, preserving task order in the output, and
/// returns per-task wall-clock times alongside the results.
fn run_tasks<T, F>(pool: &rayon::ThreadPool, count: usize, task: F) -> Result<(Vec<T>, Vec<f64>)>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let timed: Vec<(T, f64)> = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let value = task(i)?;
                Ok((value, start.elapsed().as_secs_f64() * 1e3))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut values = Vec::with_capacity(count);
    let mut times = Vec::with_capacity(count);
    for (v, t) in timed {
        values.push(v);
        times.push(t);
    }
    Ok((values, times))
}

struct ExperimentOutput {
    artifacts: Vec<Artifact>,
    run_wall_ms: Vec<f64>,
}

fn loss_chart(title: &str, traces: &[(String, Vec<(f64, f64)>)]) -> LineChart {
    LineChart {
        title: title.to_string(),
        x_label: "step".to_string(),
        y_label: "value".to_string(),
        series: traces
            .iter()
            .take(CHART_SERIES_CAP)
            .map(|(label, points)| Series {
                label: label.clone(),
                points: points.clone(),
            })
            .collect(),
    }
}

fn run_sample(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    let grid = TimestepGrid::uniform(config.train_steps, config.nfe, config.direction)?;
    let mode = config.guidance.materialize(schedule, &grid)?;
    let (runs, times) = run_tasks(pool, config.seeds.len(), |i| {
        let seed = config.seeds[i];
        let traj: Trajectory = sample(
            model,
            schedule,
            &grid,
            &mode,
            &config.solver,
            &config.condition,
            RunKey::new(seed, 0),
            None,
        )?;
        let trace = track_loss(&traj, model, schedule, &config.condition)?;
        Ok((traj, trace))
    })?;

    let dim = model.dim();
    let mut schema = owned_schema(&["run_id", "step", "t", "alpha_bar"]);
    schema.extend(state_columns("x", dim));
    schema.extend(owned_schema(&["loss_sds", "manifold_proxy"]));

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (run_id, (traj, trace)) in runs.iter().enumerate() {
        let mut points = Vec::new();
        for (step, (record, (t, loss))) in traj.records.iter().zip(&trace.points).enumerate() {
            let mut row = vec![
                run_id.to_string(),
                step.to_string(),
                t.to_string(),
                float_cell(record.alpha_bar),
            ];
            row.extend(record.x.iter().map(|v| float_cell(*v)));
            row.push(float_cell(*loss));
            row.push(float_cell(manifold_proxy(&record.x, model)?));
            rows.push(row);
            points.push((step as f64, *loss));
        }
        traces.push((format!("run {run_id}"), points));
    }

    Ok(ExperimentOutput {
        artifacts: vec![
            csv_artifact("trajectory.csv", &schema, &rows)?,
            chart_artifact("loss_trace.svg", &loss_chart("normalized loss along the run", &traces))?,
        ],
        run_wall_ms: times,
    })
}

fn run_invert(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    let grid_up = TimestepGrid::uniform(config.train_steps, config.nfe, GridDirection::Inversion)?;
    let mode = config.guidance.materialize(schedule, &grid_up)?;
    let (runs, times) = run_tasks(pool, config.seeds.len(), |i| {
        let seed = config.seeds[i];
        let x0 = prior_sample(model, &config.condition, seed)?;
        ddim_invert(&x0, model, schedule, &grid_up, &mode, &config.condition)
    })?;

    let latent_schema = {
        let mut s = owned_schema(&["run_id", "seed"]);
        s.extend(state_columns("z", model.dim()));
        s
    };
    let defect_schema = owned_schema(&["run_id", "seed", "step", "residual", "shift_diff"]);

    let mut latent_rows = Vec::new();
    let mut defect_rows = Vec::new();
    let mut traces = Vec::new();
    for (run_id, run) in runs.iter().enumerate() {
        let seed = config.seeds[run_id];
        let mut row = vec![run_id.to_string(), seed.to_string()];
        row.extend(run.latent.iter().map(|v| float_cell(*v)));
        latent_rows.push(row);
        let mut points = Vec::new();
        for (step, (res, shift)) in run
            .per_step_residuals
            .iter()
            .zip(&run.per_step_shift_diff)
            .enumerate()
        {
            defect_rows.push(vec![
                run_id.to_string(),
                seed.to_string(),
                step.to_string(),
                float_cell(*res),
                float_cell(*shift),
            ]);
            points.push((step as f64, *res));
        }
        traces.push((format!("run {run_id}"), points));
    }

    Ok(ExperimentOutput {
        artifacts: vec![
            csv_artifact("latents.csv", &latent_schema, &latent_rows)?,
            csv_artifact("defects.csv", &defect_schema, &defect_rows)?,
            chart_artifact(
                "defect_norms.svg",
                &loss_chart("per-step consistency defect", &traces),
            )?,
        ],
        run_wall_ms: times,
    })
}

/// Step counts used by the roundtrip discretization study, merged with the
/// configured count.
fn roundtrip_ladder(config: &ExperimentConfig) -> Vec<usize> {
    let mut ladder: Vec<usize> = [25usize, 50, 100, 200]
        .into_iter()
        .filter(|n| *n <= config.train_steps)
        .collect();
    ladder.push(config.nfe);
    ladder.sort_unstable();
    ladder.dedup();
    ladder
}

fn run_roundtrip(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    let ladder = roundtrip_ladder(config);
    let mut tasks = Vec::new();
    for &seed in &config.seeds {
        for &nfe in &ladder {
            tasks.push((seed, nfe));
        }
    }
    let (reports, times) = run_tasks(pool, tasks.len(), |i| {
        let (seed, nfe) = tasks[i];
        let grid = TimestepGrid::uniform(config.train_steps, nfe, GridDirection::Sampling)?;
        let mode = config.guidance.materialize(schedule, &grid)?;
        let x0 = prior_sample(model, &config.condition, seed)?;
        roundtrip(&x0, model, schedule, nfe, &mode, &config.condition)
    })?;

    let schema = owned_schema(&["run_id", "mode", "scale", "nfe", "seed", "l2_error", "db"]);
    let mut rows = Vec::new();
    for (run_id, ((seed, nfe), report)) in tasks.iter().zip(&reports).enumerate() {
        rows.push(vec![
            run_id.to_string(),
            config.guidance.style.to_string(),
            float_cell(config.guidance.scale),
            nfe.to_string(),
            seed.to_string(),
            float_cell(report.l2_error),
            float_cell(report.db),
        ]);
    }

    // Mean reconstruction error per step count.
    let mut points = Vec::new();
    for &nfe in &ladder {
        let errs: Vec<f64> = tasks
            .iter()
            .zip(&reports)
            .filter(|((_, n), _)| *n == nfe)
            .map(|(_, r)| r.l2_error)
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        points.push((nfe as f64, mean));
    }
    let chart = LineChart {
        title: "reconstruction error vs step count".to_string(),
        x_label: "nfe".to_string(),
        y_label: "mean L2 error".to_string(),
        series: vec![Series {
            label: config.guidance.token(),
            points,
        }],
    };

    Ok(ExperimentOutput {
        artifacts: vec![
            csv_artifact("roundtrip.csv", &schema, &rows)?,
            chart_artifact("error_vs_nfe.svg", &chart)?,
        ],
        run_wall_ms: times,
    })
}

fn run_edit(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    let grid = TimestepGrid::uniform(config.train_steps, config.nfe, GridDirection::Inversion)?;
    let mode = config.guidance.materialize(schedule, &grid)?;
    let (runs, times) = run_tasks(pool, config.seeds.len(), |i| {
        let seed = config.seeds[i];
        let x0 = prior_sample(model, &config.condition, seed)?;
        edit(
            &x0,
            model,
            schedule,
            config.nfe,
            &mode,
            &config.condition,
            &config.edit_target,
        )
    })?;

    let mut schema = owned_schema(&["run_id", "seed"]);
    schema.extend(state_columns("x", model.dim()));
    schema.extend(owned_schema(&["nearest_component", "manifold_proxy"]));
    let mut rows = Vec::new();
    for (run_id, (_latent, edited)) in runs.iter().enumerate() {
        let mut row = vec![run_id.to_string(), config.seeds[run_id].to_string()];
        row.extend(edited.iter().map(|v| float_cell(*v)));
        row.push(nearest_component(edited, model)?.to_string());
        row.push(float_cell(manifold_proxy(edited, model)?));
        rows.push(row);
    }

    Ok(ExperimentOutput {
        artifacts: vec![csv_artifact("edit.csv", &schema, &rows)?],
        run_wall_ms: times,
    })
}

/// Relative deviation threshold for declaring the two guidance styles
/// equivalent along a trajectory.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

fn run_equiv_check(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    let lambda = config.guidance.scale;
    let grid = TimestepGrid::uniform(config.train_steps, config.nfe, GridDirection::Sampling)?;
    let scheduled = equivalent_omega_schedule(lambda, schedule, &grid)?.mode();
    let guided = GuidanceMode::CfgPp(lambda);
    let (devs, times) = run_tasks(pool, config.seeds.len(), |i| {
        let seed = config.seeds[i];
        let run =
            |mode: &GuidanceMode| {
                sample(
                    model,
                    schedule,
                    &grid,
                    mode,
                    &config.solver,
                    &config.condition,
                    RunKey::new(seed, 0),
                    None,
                )
            };
        let a = run(&guided)?;
        let b = run(&scheduled)?;
        let mut dev: f64 = 0.0;
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let rel = vecn::dist(&ra.x, &rb.x) / (1.0 + vecn::norm(&ra.x));
            dev = dev.max(rel);
        }
        Ok(dev)
    })?;

    let max_dev = devs.iter().copied().fold(0.0_f64, f64::max);
    let pass = max_dev <= EQUIVALENCE_TOLERANCE;
    let schema = owned_schema(&["lambda", "nfe", "max_rel_dev", "pass"]);
    let rows = vec![vec![
        float_cell(lambda),
        config.nfe.to_string(),
        float_cell(max_dev),
        if pass { "PASS" } else { "FAIL" }.to_string(),
    ]];

    Ok(ExperimentOutput {
        artifacts: vec![csv_artifact("equivalence.csv", &schema, &rows)?],
        run_wall_ms: times,
    })
}

fn run_inverse_problem(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    let grid = TimestepGrid::uniform(config.train_steps, config.nfe, GridDirection::Sampling)?;
    let mode = config.guidance.materialize(schedule, &grid)?;
    let (results, times) = run_tasks(pool, config.seeds.len(), |i| {
        let seed = config.seeds[i];
        let key = RunKey::new(seed, 0);
        let x_true = prior_sample(model, &config.condition, seed)?;
        let measurement =
            Measurement::synthesize(&x_true, config.noise_std, config.operator.clone(), key)?;
        let params = InverseParams {
            gamma: config.gamma.clone(),
            mode: config.consistency,
            guidance: mode.clone(),
        };
        solve_inverse_wrapper(model, schedule, &grid, &measurement, &params, config, key, &x_true)
    })?;

    let mut schema = owned_schema(&["run_id", "seed", "truth_error", "final_residual"]);
    schema.extend(state_columns("x", model.dim()));
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (run_id, result) in results.iter().enumerate() {
        let mut row = vec![
            run_id.to_string(),
            config.seeds[run_id].to_string(),
            float_cell(result.report.truth_error.unwrap_or(f64::NAN)),
            float_cell(result.report.final_residual),
        ];
        row.extend(result.report.final_state.iter().map(|v| float_cell(*v)));
        rows.push(row);
        let points: Vec<(f64, f64)> = result
            .report
            .per_step_residuals
            .iter()
            .enumerate()
            .map(|(s, r)| (s as f64, *r))
            .collect();
        traces.push((format!("run {run_id}"), points));
    }

    Ok(ExperimentOutput {
        artifacts: vec![
            csv_artifact("inverse.csv", &schema, &rows)?,
            chart_artifact(
                "residuals.svg",
                &loss_chart("measurement residual along the run", &traces),
            )?,
        ],
        run_wall_ms: times,
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_inverse_wrapper(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    measurement: &Measurement,
    params: &InverseParams,
    config: &ExperimentConfig,
    key: RunKey,
    x_true: &[f64],
) -> Result<crate::inverse_problem::InverseSolveResult> {
    crate::inverse_problem::solve_inverse(
        model,
        schedule,
        grid,
        measurement,
        params,
        &config.condition,
        key,
        Some(x_true),
    )
}

fn run_sweep(
    config: &ExperimentConfig,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &rayon::ThreadPool,
) -> Result<ExperimentOutput> {
    // Tasks: matched pair x guidance style x seed, with identical starting
    // samples across styles at each seed so comparisons are paired. Starting
    // points come from the full mixture prior; the configured condition
    // drives only the guidance, so the two styles are compared on how they
    // pull an arbitrary prior sample toward the conditioned component.
    let mut tasks: Vec<(usize, &str, f64, u64)> = Vec::new();
    for (pair, (lambda, omega)) in MATCHED_SCALE_PAIRS.iter().enumerate() {
        for &seed in &config.seeds {
            tasks.push((pair, "cfgpp", *lambda, seed));
            tasks.push((pair, "cfg", *omega, seed));
        }
    }
    let (reports, times) = run_tasks(pool, tasks.len(), |i| {
        let (_, style, scale, seed) = tasks[i];
        let mode = match style {
            "cfgpp" => GuidanceMode::CfgPp(scale),
            _ => GuidanceMode::Cfg(scale),
        };
        let x0 = prior_sample(model, &Condition::Null, seed)?;
        roundtrip(&x0, model, schedule, config.nfe, &mode, &config.condition)
    })?;

    let schema = owned_schema(&["run_id", "mode", "scale", "nfe", "seed", "l2_error", "db"]);
    let mut rows = Vec::new();
    for (run_id, ((_, style, scale, seed), report)) in tasks.iter().zip(&reports).enumerate() {
        rows.push(vec![
            run_id.to_string(),
            style.to_string(),
            float_cell(*scale),
            config.nfe.to_string(),
            seed.to_string(),
            float_cell(report.l2_error),
            float_cell(report.db),
        ]);
    }

    // Mean error per matched pair, one series per style.
    let mut series = Vec::new();
    for style in ["cfgpp", "cfg"] {
        let mut points = Vec::new();
        for pair in 0..MATCHED_SCALE_PAIRS.len() {
            let errs: Vec<f64> = tasks
                .iter()
                .zip(&reports)
                .filter(|((p, s, _, _), _)| *p == pair && *s == style)
                .map(|(_, r)| r.l2_error)
                .collect();
            points.push((pair as f64, errs.iter().sum::<f64>() / errs.len() as f64));
        }
        series.push(Series {
            label: style.to_string(),
            points,
        });
    }
    let chart = LineChart {
        title: "reconstruction error across matched scale pairs".to_string(),
        x_label: "matched pair index".to_string(),
        y_label: "mean L2 error".to_string(),
        series,
    };

    Ok(ExperimentOutput {
        artifacts: vec![
            csv_artifact("sweep.csv", &schema, &rows)?,
            chart_artifact("error_vs_pair.svg", &chart)?,
        ],
        run_wall_ms: times,
    })
}

/// Executes the configured experiment and writes its artifacts plus
/// `manifest.json` into the output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let model = config.model.build()?;
    let schedule = config.build_schedule()?;
    let pool = build_pool()?;

    let mut output = match config.experiment {
        ExperimentKind::Sample => run_sample(config, &model, &schedule, &pool)?,
        ExperimentKind::Invert => run_invert(config, &model, &schedule, &pool)?,
        ExperimentKind::Roundtrip => run_roundtrip(config, &model, &schedule, &pool)?,
        ExperimentKind::Edit => run_edit(config, &model, &schedule, &pool)?,
        ExperimentKind::EquivCheck => run_equiv_check(config, &model, &schedule, &pool)?,
        ExperimentKind::InverseProblem => run_inverse_problem(config, &model, &schedule, &pool)?,
        ExperimentKind::Sweep => run_sweep(config, &model, &schedule, &pool)?,
    };
    output.artifacts.push(Artifact {
        name: "config.txt".to_string(),
        bytes: config.to_text().into_bytes(),
    });

    let out_dir: &Path = &config.out_dir;
    let mut files: Vec<String> = output.artifacts.iter().map(|a| a.name.clone()).collect();
    files.sort_unstable();
    for artifact in &output.artifacts {
        write_atomic(&out_dir.join(&artifact.name), &artifact.bytes)?;
    }

    let manifest = RunManifest {
        config_hash: config.hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: config.experiment.to_string(),
        files,
        run_wall_ms: output.run_wall_ms,
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Invariant(format!("manifest serialization: {e}")))?;
    manifest_bytes.push(b'\n');
    write_atomic(&out_dir.join("manifest.json"), &manifest_bytes)?;
    Ok(manifest)
}
