//! End-to-end pipelines shared by the command-line runner and the tests.

use serde::{Deserialize, Serialize};

use crate::analysis::{frechet_distance, measure_memory, MemoryReport};
use crate::calibration::{
    calibrate_all, endpoint_mse, fp_trajectories, init_store, partition_groups, BitWidths,
    CalibrationConfig, CalibrationReport, GradientMode, GroupPlan,
};
use crate::denoiser::{
    generate_dataset, train_toy_denoiser, DatasetKind, Denoiser, LinearDenoiser, QuantizedModel,
    TrainConfig,
};
use crate::diffusion::{make_schedule, rollout, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, ordered_map, Rng, Tensor};
use crate::quantizer::GroupQuantizerStore;

/// Substreams of the experiment seed.
const STREAM_MODEL: u64 = 0;
const STREAM_CALIBRATION: u64 = 1;
const STREAM_EVALUATION: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            kind: ScheduleKind::default(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Random affine model; `weight_scale` sets the spectral scale of `W_t`.
    Linear { dim: usize, weight_scale: f64 },
    /// MLP trained on a toy 2-D dataset.
    Mlp {
        dataset: DatasetKind,
        dataset_size: usize,
        #[serde(default)]
        train: TrainConfig,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp {
            dataset: DatasetKind::Ring,
            dataset_size: 4096,
            train: TrainConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Linear { dim, weight_scale } => {
                if *dim == 0 || !weight_scale.is_finite() {
                    return Err(Error::InvalidArgument(
                        "linear model needs dim >= 1 and a finite weight_scale".into(),
                    ));
                }
            }
            ModelSpec::Mlp {
                dataset_size,
                train,
                ..
            } => {
                if *dataset_size == 0 {
                    return Err(Error::InvalidArgument("dataset_size must be >= 1".into()));
                }
                if train.epochs == 0 || train.steps_per_epoch == 0 || train.batch_size == 0 {
                    return Err(Error::InvalidArgument(
                        "train.epochs, train.steps_per_epoch and train.batch_size must be >= 1"
                            .into(),
                    ));
                }
                if train.hidden == 0 || train.embed % 2 != 0 {
                    return Err(Error::InvalidArgument(
                        "train.hidden must be >= 1 and train.embed even".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the model; the MLP's training seed is mixed with `seed`.
    pub fn build(&self, schedule: &NoiseSchedule, seed: u64) -> Result<(Denoiser, Vec<f64>)> {
        let rng = Rng::substream(seed, STREAM_MODEL);
        match self {
            ModelSpec::Linear { dim, weight_scale } => {
                let mut r = rng.fork(0);
                let m = LinearDenoiser::random(*dim, schedule.steps(), *weight_scale, &mut r)?;
                Ok((Denoiser::Linear(m), Vec::new()))
            }
            ModelSpec::Mlp {
                dataset,
                dataset_size,
                train,
            } => {
                let data = generate_dataset(*dataset, *dataset_size, seed)?;
                let cfg = TrainConfig {
                    seed: train.seed ^ seed,
                    ..*train
                };
                let trained = train_toy_denoiser(&data, schedule, &cfg)?;
                Ok((Denoiser::Mlp(trained.model), trained.epoch_losses))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fréchet distance between quantized and full-precision final samples.
    pub frechet_to_fp: f64,
    /// Paired squared distance of final samples from the same start noise.
    pub endpoint_mse: f64,
    pub init_frechet_to_fp: f64,
    pub init_endpoint_mse: f64,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub plan: GroupPlan,
    pub report: CalibrationReport,
    pub metrics: Metrics,
    pub memory: MemoryReport,
    pub initial_store: GroupQuantizerStore,
}

/// Final samples of full-length rollouts from `starts`, quantized with `store`
/// (the group of each step taken from `plan`) or in full precision.
pub fn sample_endpoints(
    model: &Denoiser,
    quant: Option<(&GroupQuantizerStore, &GroupPlan)>,
    schedule: &NoiseSchedule,
    starts: &[Tensor],
) -> Result<Vec<Tensor>> {
    let t = schedule.steps();
    let out = match quant {
        Some((store, plan)) => {
            let plan = plan.clone();
            let q = QuantizedModel::new(model, store, move |s| {
                plan.group_of_step(s).unwrap_or(usize::MAX)
            })?;
            ordered_map(starts, |x| rollout(&q, x, t, t, schedule).map(|tr| tr.last().clone()))
        }
        None => ordered_map(starts, |x| rollout(model, x, t, t, schedule).map(|tr| tr.last().clone())),
    };
    out.into_iter().collect()
}

/// Standard-normal start states for evaluation.
pub fn evaluation_starts(dim: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let rng = Rng::substream(seed, STREAM_EVALUATION);
    (0..count)
        .map(|i| gaussian_sample(&mut rng.fork(i as u64), &[dim]))
        .collect()
}

fn metrics_for(
    model: &Denoiser,
    store: &GroupQuantizerStore,
    plan: &GroupPlan,
    schedule: &NoiseSchedule,
    starts: &[Tensor],
    fp_ends: &[Tensor],
) -> Result<(f64, f64)> {
    let q_ends = sample_endpoints(model, Some((store, plan)), schedule, starts)?;
    Ok((frechet_distance(&q_ends, fp_ends)?, endpoint_mse(fp_ends, &q_ends)?))
}

/// Initializes quantizers by min-max, calibrates every group and evaluates
/// on `eval_samples` held-out rollouts.
pub fn run_calibration(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    group_size: usize,
    bits: BitWidths,
    config: &CalibrationConfig,
    eval_samples: usize,
) -> Result<CalibrationOutcome> {
    config.validate()?;
    let group_size = if config.mode == GradientMode::PerStepBaseline {
        1
    } else {
        group_size
    };
    let plan = partition_groups(schedule.steps(), group_size)?;
    let calib_rng = Rng::substream(config.seed, STREAM_CALIBRATION);
    let fp = fp_trajectories(model, schedule, config.samples_per_group, &calib_rng)?;
    let initial_store = init_store(model, &plan, &fp, bits)?;
    let mut store = initial_store.clone();
    let report = calibrate_all(model, &mut store, &plan, &fp, schedule, config)?;

    let starts = evaluation_starts(model.dim(), eval_samples, config.seed)?;
    let fp_ends = sample_endpoints(model, None, schedule, &starts)?;
    let (init_frechet_to_fp, init_endpoint_mse) =
        metrics_for(model, &initial_store, &plan, schedule, &starts, &fp_ends)?;
    let (frechet_to_fp, endpoint_mse) =
        metrics_for(model, &store, &plan, schedule, &starts, &fp_ends)?;
    let memory = measure_memory(model, &report);
    Ok(CalibrationOutcome {
        plan,
        report,
        metrics: Metrics {
            frechet_to_fp,
            endpoint_mse,
            init_frechet_to_fp,
            init_endpoint_mse,
            eval_samples,
        },
        memory,
        initial_store,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn linear_pipeline_runs_and_is_deterministic() {
        let schedule = ScheduleSpec {
            steps: 8,
            ..Default::default()
        }
        .build()
        .unwrap();
        let spec = ModelSpec::Linear {
            dim: 2,
            weight_scale: 0.5,
        };
        let (model, _) = spec.build(&schedule, 3).unwrap();
        let config = CalibrationConfig {
            epochs: 2,
            batch_size: 2,
            samples_per_group: 4,
            seed: 3,
            ..Default::default()
        };
        let bits = BitWidths {
            weight: 4,
            activation: 6,
        };
        let a = run_calibration(&model, &schedule, 4, bits, &config, 16).unwrap();
        let b = run_calibration(&model, &schedule, 4, bits, &config, 16).unwrap();
        assert_eq!(a.plan.len(), 2);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.report.store, b.report.store);
        assert!(a.metrics.frechet_to_fp.is_finite());
    }

    #[test]
    fn schedule_spec_json() {
        let spec: ScheduleSpec = serde_json::from_value(serde_json::json!({
            "steps": 10,
            "kind": "linear_beta",
            "params": {"beta_start": 1e-4, "beta_end": 0.02}
        }))
        .unwrap();
        assert_eq!(spec.build().unwrap().steps(), 10);
    }
}
