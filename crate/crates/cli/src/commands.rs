use std::path::PathBuf;
use std::time::Instant;

use accuquant::analysis::{measure_grad_dominance, simulate_error_accumulation};
use accuquant::calibration::{fp_trajectories, init_store, partition_groups, BitWidths};
use accuquant::experiment::{median, run_calibration, CalibrationOutcome};
use accuquant::{Rng, Tensor};
use serde::Serialize;

use crate::config::{require, ExperimentConfig, GradDominanceSpec, SweepAxis};
use crate::error::CliError;
use crate::output::{Cell, OutDir};

/// Substreams of the run seed used only by the runner.
const STREAM_ERROR_ACCUM: u64 = 3;
const STREAM_PROBES: u64 = 4;
const STREAM_PROBE_DIRECTIONS: u64 = 5;

pub fn error_accum(cfg: &ExperimentConfig, out: PathBuf) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let spec = cfg.error_accum.unwrap_or_default();
    if spec.trials == 0 || spec.dim == 0 || !(spec.delta_sigma > 0.0) {
        return Err(CliError::Config(
            "error_accum needs trials >= 1, dim >= 1 and delta_sigma > 0".into(),
        ));
    }
    let out = OutDir::create(out)?;
    let rng = Rng::substream(cfg.seed, STREAM_ERROR_ACCUM);
    let trace = simulate_error_accumulation(&schedule, spec.trials, spec.delta_sigma, spec.dim, &rng)?;

    let mut csv = out.csv("error_trace.csv")?;
    csv.header(&["t", "step_err_mean", "step_err_std", "accum_err_mean", "accum_err_std"])?;
    for (i, &t) in trace.steps.iter().enumerate() {
        csv.row(&[
            t.into(),
            trace.step_err_mean[i].into(),
            trace.step_err_std[i].into(),
            trace.accum_err_mean[i].into(),
            trace.accum_err_std[i].into(),
        ])?;
    }
    csv.flush()?;

    #[derive(Serialize)]
    struct Summary<'a> {
        experiment: &'a str,
        steps: usize,
        trials: usize,
        dim: usize,
        delta_sigma: f64,
        seed: u64,
        final_ratio: f64,
        increasing_transitions: usize,
        transitions: usize,
    }
    out.json(
        "summary.json",
        &Summary {
            experiment: &cfg.name,
            steps: schedule.steps(),
            trials: trace.trials,
            dim: trace.dim,
            delta_sigma: trace.delta_sigma,
            seed: cfg.seed,
            final_ratio: trace.final_ratio(),
            increasing_transitions: trace.increasing_transitions(),
            transitions: trace.steps.len() - 1,
        },
    )
}

pub fn train_denoiser(cfg: &ExperimentConfig, out: PathBuf) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    require(&cfg.model, "model")?.validate()?;
    let out = OutDir::create(out)?;
    let (model, losses) = require(&cfg.model, "model")?.build(&schedule, cfg.seed)?;
    out.json("model.json", &model)?;
    let mut csv = out.csv("train_losses.csv")?;
    csv.header(&["epoch", "loss"])?;
    for (i, &l) in losses.iter().enumerate() {
        csv.row(&[i.into(), l.into()])?;
    }
    csv.flush()?;

    #[derive(Serialize)]
    struct Summary<'a> {
        experiment: &'a str,
        seed: u64,
        dim: usize,
        epochs: usize,
        final_loss: Option<f64>,
    }
    out.json(
        "summary.json",
        &Summary {
            experiment: &cfg.name,
            seed: cfg.seed,
            dim: model.dim(),
            epochs: losses.len(),
            final_loss: losses.last().copied(),
        },
    )
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    experiment: &'a str,
    seed: u64,
    mode: String,
    group_size: usize,
    weight_bits: u32,
    activation_bits: u32,
    frechet_to_fp: f64,
    endpoint_mse: f64,
    init_frechet_to_fp: f64,
    init_endpoint_mse: f64,
    eval_samples: usize,
}

pub fn calibrate(cfg: &ExperimentConfig, out: PathBuf) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    cfg.check_model()?;
    let bits = cfg.check_quantization()?;
    let group_size = cfg.check_plan(&schedule)?;
    let calib = cfg.calibration()?;
    let eval = cfg.evaluation()?;
    let out = OutDir::create(out)?;

    let clock = Instant::now();
    let (model, _) = cfg.build_model(&schedule)?;
    out.json("model.json", &model)?;
    let outcome = run_calibration(&model, &schedule, group_size, bits, &calib, eval.samples)?;
    for g in &outcome.report.groups {
        eprintln!(
            "group {:>3} (t={}..{}): {:.3}s",
            g.group,
            g.start_step,
            g.start_step + 1 - g.len,
            g.wall_clock.as_secs_f64()
        );
    }
    eprintln!("calibration finished in {:.2}s", clock.elapsed().as_secs_f64());

    out.json("report.json", &outcome.report)?;
    for g in &outcome.report.groups {
        let mut csv = out.csv(&format!("losses/group_{:03}.csv", g.group))?;
        csv.header(&["epoch", "loss"])?;
        for (i, &l) in g.losses.iter().enumerate() {
            csv.row(&[i.into(), l.into()])?;
        }
        csv.flush()?;
    }
    out.json("store.json", &outcome.report.store)?;
    out.json("initial_store.json", &outcome.initial_store)?;
    out.json("metrics.json", &metrics_doc(cfg, &outcome, bits))?;
    out.json("memory.json", &outcome.memory)
}

fn metrics_doc<'a>(cfg: &'a ExperimentConfig, o: &CalibrationOutcome, bits: BitWidths) -> MetricsDoc<'a> {
    MetricsDoc {
        experiment: &cfg.name,
        seed: cfg.seed,
        mode: o.report.mode.to_string(),
        group_size: o.report.group_size,
        weight_bits: bits.weight,
        activation_bits: bits.activation,
        frechet_to_fp: o.metrics.frechet_to_fp,
        endpoint_mse: o.metrics.endpoint_mse,
        init_frechet_to_fp: o.metrics.init_frechet_to_fp,
        init_endpoint_mse: o.metrics.init_endpoint_mse,
        eval_samples: o.metrics.eval_samples,
    }
}

pub fn grad_dominance(cfg: &ExperimentConfig, out: PathBuf) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    cfg.check_model()?;
    let spec: GradDominanceSpec = cfg.grad_dominance.unwrap_or_default();
    if spec.trajectories == 0 {
        return Err(CliError::Config("grad_dominance.trajectories must be >= 1".into()));
    }
    let quant_cfg = if spec.quantized {
        Some((cfg.check_quantization()?, cfg.check_plan(&schedule)?))
    } else {
        None
    };
    let out = OutDir::create(out)?;

    let (model, _) = cfg.build_model(&schedule)?;
    let trajs = fp_trajectories(
        &model,
        &schedule,
        spec.trajectories,
        &Rng::substream(cfg.seed, STREAM_PROBES),
    )?;
    let probes: Vec<(Tensor, usize)> = trajs
        .iter()
        .flat_map(|tr| tr.states.iter().filter(|(t, _)| *t >= 1).map(|(t, x)| (x.clone(), *t)))
        .collect();
    let quant = match quant_cfg {
        Some((bits, m)) => {
            let plan = partition_groups(schedule.steps(), m)?;
            let store = init_store(&model, &plan, &trajs, bits)?;
            Some((store, plan))
        }
        None => None,
    };
    let report = measure_grad_dominance(
        &model,
        quant.as_ref().map(|(s, p)| (s, p)),
        &probes,
        &schedule,
        &Rng::substream(cfg.seed, STREAM_PROBE_DIRECTIONS),
    )?;

    let mut csv = out.csv("grad_dominance.csv")?;
    csv.header(&["t", "scalar", "jacobian", "full", "jacobian_frobenius"])?;
    for p in &report.probes {
        csv.row(&[
            p.t.into(),
            p.scalar.into(),
            p.jacobian.into(),
            p.full.into(),
            p.jacobian_frobenius.into(),
        ])?;
    }
    csv.flush()?;

    let mut csv = out.csv("grad_dominance_steps.csv")?;
    csv.header(&[
        "t",
        "probes",
        "scalar_mean",
        "scalar_std",
        "jacobian_mean",
        "jacobian_std",
        "full_mean",
        "full_std",
        "ratio_mean",
    ])?;
    for s in &report.steps {
        csv.row(&[
            s.t.into(),
            s.probes.into(),
            s.scalar_mean.into(),
            s.scalar_std.into(),
            s.jacobian_mean.into(),
            s.jacobian_std.into(),
            s.full_mean.into(),
            s.full_std.into(),
            s.ratio_mean.into(),
        ])?;
    }
    csv.flush()?;

    out.json("schedule.json", &schedule)?;
    if spec.dump_matrices {
        out.json("grad_dominance_matrices.json", &report.probes)?;
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        experiment: &'a str,
        seed: u64,
        quantized: bool,
        probes: usize,
        mean_ratio: Option<f64>,
        /// Over the last quarter of the sampling steps, `t <= T/4`.
        mean_ratio_last_quarter: Option<f64>,
    }
    let quarter = schedule.steps() / 4;
    out.json(
        "summary.json",
        &Summary {
            experiment: &cfg.name,
            seed: cfg.seed,
            quantized: spec.quantized,
            probes: report.probes.len(),
            mean_ratio: report.mean_ratio(|_| true),
            mean_ratio_last_quarter: report.mean_ratio(|t| t <= quarter),
        },
    )
}

pub fn sweep(cfg: &ExperimentConfig, out: PathBuf) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    cfg.check_model()?;
    let bits = cfg.check_quantization()?;
    let group_size = cfg.check_plan(&schedule)?;
    let calib = cfg.calibration()?;
    let eval = cfg.evaluation()?;
    let spec = cfg.check_sweep(&schedule)?.clone();
    let out = OutDir::create(out)?;

    let header = ["axis_value", "seed", "endpoint_mse", "frechet_to_fp", "peak_memory"];
    let mut points = out.csv("sweep_points.csv")?;
    points.header(&header)?;
    points.flush()?;

    let clock = Instant::now();
    // results[v][k] for axis value v and seed offset k
    let mut results = vec![Vec::new(); spec.values.len()];
    for k in 0..spec.seeds {
        let seed = cfg.seed + k as u64;
        let seeded = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let (model, _) = seeded.build_model(&schedule)?;
        for (i, &v) in spec.values.iter().enumerate() {
            let (m, b) = match spec.axis {
                SweepAxis::GroupSize => (v, bits),
                SweepAxis::Bits => (
                    group_size,
                    BitWidths {
                        weight: v as u32,
                        activation: v as u32,
                    },
                ),
            };
            let c = accuquant::calibration::CalibrationConfig { seed, ..calib };
            let o = run_calibration(&model, &schedule, m, b, &c, eval.samples)?;
            points.row(&[
                v.into(),
                Cell::Int(seed),
                o.metrics.endpoint_mse.into(),
                o.metrics.frechet_to_fp.into(),
                o.memory.peak_retained.into(),
            ])?;
            points.flush()?;
            eprintln!(
                "point {v} seed {seed}: frechet {:.3e} ({:.1}s elapsed)",
                o.metrics.frechet_to_fp,
                clock.elapsed().as_secs_f64()
            );
            results[i].push(o);
        }
    }

    let mut csv = out.csv("sweep.csv")?;
    csv.header(&["axis_value", "endpoint_mse", "frechet_to_fp", "peak_memory"])?;
    #[derive(Serialize)]
    struct Row {
        axis_value: usize,
        endpoint_mse: f64,
        frechet_to_fp: f64,
        peak_memory: usize,
    }
    let mut rows = Vec::new();
    for (i, &v) in spec.values.iter().enumerate() {
        let mse: Vec<f64> = results[i].iter().map(|o| o.metrics.endpoint_mse).collect();
        let fd: Vec<f64> = results[i].iter().map(|o| o.metrics.frechet_to_fp).collect();
        let peak = results[i].iter().map(|o| o.memory.peak_retained).max().unwrap_or(0);
        let row = Row {
            axis_value: v,
            endpoint_mse: median(&mse),
            frechet_to_fp: median(&fd),
            peak_memory: peak,
        };
        csv.row(&[
            v.into(),
            row.endpoint_mse.into(),
            row.frechet_to_fp.into(),
            peak.into(),
        ])?;
        rows.push(row);
    }
    csv.flush()?;
    eprintln!("sweep finished in {:.2}s", clock.elapsed().as_secs_f64());

    #[derive(Serialize)]
    struct Summary<'a> {
        experiment: &'a str,
        seed: u64,
        seeds: usize,
        axis: SweepAxis,
        aggregate: &'static str,
        rows: Vec<Row>,
    }
    out.json(
        "sweep.json",
        &Summary {
            experiment: &cfg.name,
            seed: cfg.seed,
            seeds: spec.seeds,
            axis: spec.axis,
            aggregate: "median over seeds; peak_memory is the maximum",
            rows,
        },
    )
}
