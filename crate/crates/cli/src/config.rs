//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use accuquant::analysis::DEFAULT_ERROR_DIM;
use accuquant::calibration::{partition_groups, BitWidths, CalibrationConfig, GradientMode};
use accuquant::denoiser::Denoiser;
use accuquant::diffusion::NoiseSchedule;
use accuquant::experiment::{ModelSpec, ScheduleSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    pub schedule: Option<ScheduleSpec>,
    pub model: Option<ModelSpec>,
    /// A model JSON written by `train-denoiser`; takes precedence over `model`.
    pub model_path: Option<PathBuf>,
    pub quantization: Option<QuantizationSpec>,
    pub plan: Option<PlanSpec>,
    pub calibration: Option<CalibrationConfig>,
    pub evaluation: Option<EvaluationSpec>,
    pub error_accum: Option<ErrorAccumSpec>,
    pub grad_dominance: Option<GradDominanceSpec>,
    pub sweep: Option<SweepSpec>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationSpec {
    pub weight_bits: u32,
    pub activation_bits: u32,
}

impl QuantizationSpec {
    pub fn bits(&self) -> BitWidths {
        BitWidths {
            weight: self.weight_bits,
            activation: self.activation_bits,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub group_size: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    pub samples: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self { samples: 1000 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorAccumSpec {
    pub trials: usize,
    pub delta_sigma: f64,
    pub dim: usize,
}

impl Default for ErrorAccumSpec {
    fn default() -> Self {
        Self {
            trials: 512,
            delta_sigma: 1.0,
            dim: DEFAULT_ERROR_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradDominanceSpec {
    /// Full-precision rollouts whose states serve as probes.
    pub trajectories: usize,
    /// Probe the min-max initialized quantized model instead of the FP one.
    pub quantized: bool,
    /// Also write every assembled step Jacobian.
    pub dump_matrices: bool,
}

impl Default for GradDominanceSpec {
    fn default() -> Self {
        Self {
            trajectories: 8,
            quantized: false,
            dump_matrices: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    GroupSize,
    /// Sets weight and activation bits together.
    Bits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Seeds per point, counted up from the run seed.
    #[serde(default = "one")]
    pub seeds: usize,
}

fn one() -> usize {
    1
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Returns the section or a config error naming it.
pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    section
        .as_ref()
        .ok_or_else(|| config_err(format!("missing config field `{name}`")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(require(&self.schedule, "schedule")?.build()?)
    }

    /// Checks the model source without building it.
    pub fn check_model(&self) -> Result<(), CliError> {
        match (&self.model_path, &self.model) {
            (Some(p), _) => {
                if !p.is_file() {
                    return Err(config_err(format!("model_path {} is not a file", p.display())));
                }
                Ok(())
            }
            (None, Some(m)) => Ok(m.validate()?),
            (None, None) => Err(config_err("missing config field `model`")),
        }
    }

    pub fn check_quantization(&self) -> Result<BitWidths, CliError> {
        let q = require(&self.quantization, "quantization")?;
        check_bits(q.weight_bits, "quantization.weight_bits")?;
        check_bits(q.activation_bits, "quantization.activation_bits")?;
        Ok(q.bits())
    }

    /// The calibration section with the run seed applied.
    pub fn calibration(&self) -> Result<CalibrationConfig, CliError> {
        let mut c = *require(&self.calibration, "calibration")?;
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn check_plan(&self, schedule: &NoiseSchedule) -> Result<usize, CliError> {
        let m = require(&self.plan, "plan")?.group_size;
        partition_groups(schedule.steps(), m)?;
        Ok(m)
    }

    pub fn evaluation(&self) -> Result<EvaluationSpec, CliError> {
        let e = self.evaluation.unwrap_or_default();
        if e.samples < 2 {
            return Err(config_err("evaluation.samples must be >= 2"));
        }
        Ok(e)
    }

    pub fn check_sweep(&self, schedule: &NoiseSchedule) -> Result<&SweepSpec, CliError> {
        let s = require(&self.sweep, "sweep")?;
        if s.values.is_empty() {
            return Err(config_err("sweep.values must not be empty"));
        }
        if s.seeds == 0 {
            return Err(config_err("sweep.seeds must be >= 1"));
        }
        for &v in &s.values {
            match s.axis {
                SweepAxis::GroupSize => {
                    partition_groups(schedule.steps(), v)?;
                }
                SweepAxis::Bits => check_bits(v as u32, "sweep.values")?,
            }
        }
        if s.axis == SweepAxis::GroupSize
            && require(&self.calibration, "calibration")?.mode == GradientMode::PerStepBaseline
        {
            return Err(config_err(
                "a group_size sweep needs mode approx or exact-bptt",
            ));
        }
        Ok(s)
    }

    /// Loads or builds the denoiser.
    pub fn build_model(&self, schedule: &NoiseSchedule) -> Result<(Denoiser, Vec<f64>), CliError> {
        if let Some(path) = &self.model_path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let model: Denoiser = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            model.validate()?;
            if let Some(max) = model.max_step() {
                if max < schedule.steps() {
                    return Err(config_err(format!(
                        "model covers {max} steps but the schedule has {}",
                        schedule.steps()
                    )));
                }
            }
            return Ok((model, Vec::new()));
        }
        let spec = require(&self.model, "model")?;
        Ok(spec.build(schedule, self.seed)?)
    }
}

fn check_bits(bits: u32, field: &str) -> Result<(), CliError> {
    if !(2..=16).contains(&bits) {
        return Err(config_err(format!("{field} must be in 2..=16, got {bits}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"name": "x"}"#).unwrap();
        assert_eq!(c.seed, 0);
        assert!(c.schedule().is_err());
    }

    #[test]
    fn missing_name_is_named() {
        let e = serde_json::from_str::<ExperimentConfig>("{}").unwrap_err();
        assert!(e.to_string().contains("`name`"));
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"name": "x", "typo": 1}"#).is_err());
    }

    #[test]
    fn missing_section_message() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"name": "x"}"#).unwrap();
        let e = c.calibration().unwrap_err();
        assert!(e.to_string().contains("`calibration`"));
    }
}
