//! Noise schedules, the forward diffusion map and deterministic DDIM steps.
//!
//! A step from `t` to `t - 1` is written in the affine form
//! `x_{t-1} = d_t x_t + c_t eps` with
//! `d_t = sqrt(a_{t-1} / a_t)` and
//! `c_t = -sqrt(a_{t-1}) sqrt(1 - a_t) / sqrt(a_t) + sqrt(1 - a_{t-1})`,
//! which makes the propagation of state and prediction perturbations explicit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
    /// Alphas supplied directly.
    Custom,
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Cumulative signal coefficients `alpha[0..=T]`, least noisy first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDoc", into = "ScheduleDoc")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleDoc {
    #[serde(flatten)]
    kind: ScheduleKind,
    #[serde(rename = "T")]
    steps: usize,
    alpha: Vec<f64>,
}

impl TryFrom<ScheduleDoc> for NoiseSchedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        if doc.alpha.len() != doc.steps + 1 {
            return Err(Error::InvalidSchedule(format!(
                "T = {} but {} alphas",
                doc.steps,
                doc.alpha.len()
            )));
        }
        let mut s = NoiseSchedule::from_alphas(doc.alpha)?;
        s.kind = doc.kind;
        Ok(s)
    }
}

impl From<NoiseSchedule> for ScheduleDoc {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleDoc {
            kind: s.kind,
            steps: s.steps(),
            alpha: s.alpha,
        }
    }
}

impl NoiseSchedule {
    pub fn linear_beta(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        make_schedule(
            ScheduleKind::LinearBeta {
                beta_start,
                beta_end,
            },
            steps,
        )
    }

    /// Validates and wraps an explicit alpha table.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if !(alpha[0] > 0.0 && alpha[0] <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "alpha_0 = {} outside (0, 1]",
                alpha[0]
            )));
        }
        for (t, w) in alpha.windows(2).enumerate() {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha must be positive and strictly decreasing (t = {})",
                    t + 1
                )));
            }
        }
        Ok(Self {
            kind: ScheduleKind::Custom,
            alpha,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Builds a schedule of `steps` denoising steps for the given family.
///
/// For the linear-beta family the betas of steps `1..=T` are evenly spaced from
/// `beta_start` to `beta_end`, `beta_0 = beta_start`, and
/// `alpha_t = prod_{i <= t} (1 - beta_i)`.
pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta {
            beta_start,
            beta_end,
        } => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
                )));
            }
            let mut b = vec![beta_start];
            for t in 1..=steps {
                let frac = if steps == 1 {
                    0.0
                } else {
                    (t - 1) as f64 / (steps - 1) as f64
                };
                b.push(beta_start + (beta_end - beta_start) * frac);
            }
            b
        }
        ScheduleKind::Cosine { offset } => {
            if !(offset > 0.0 && offset.is_finite()) {
                return Err(Error::InvalidSchedule(format!(
                    "cosine offset must be positive, got {offset}"
                )));
            }
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + offset) / (1.0 + offset);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            let mut b = vec![0.0];
            for t in 1..=steps {
                b.push((1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999));
            }
            b
        }
        ScheduleKind::Custom => {
            return Err(Error::InvalidSchedule(
                "custom schedules are built from an alpha table".into(),
            ))
        }
    };
    let mut alpha = Vec::with_capacity(steps + 1);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha.push(acc);
    }
    let mut s = NoiseSchedule::from_alphas(alpha)?;
    s.kind = kind;
    Ok(s)
}

/// `sqrt(a_t) x0 + sqrt(1 - a_t) eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    let a = schedule.alpha(t);
    x0.scale(a.sqrt()).axpy((1.0 - a).sqrt(), eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    /// Multiplier on the predicted noise.
    pub c: f64,
    /// Multiplier on the incoming state.
    pub d: f64,
    pub t: usize,
}

pub fn step_coeffs(t: usize, schedule: &NoiseSchedule) -> Result<StepCoeffs> {
    if t == 0 {
        return Err(Error::NoStepBelowZero);
    }
    schedule.check_step(t)?;
    let a_t = schedule.alpha(t);
    let a_prev = schedule.alpha(t - 1);
    let d = (a_prev / a_t).sqrt();
    let c = -a_prev.sqrt() * (1.0 - a_t).sqrt() / a_t.sqrt() + (1.0 - a_prev).sqrt();
    Ok(StepCoeffs { c, d, t })
}

/// Deterministic DDIM update from step `t` to `t - 1`.
pub fn ddim_step(x_t: &Tensor, eps_pred: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let StepCoeffs { c, d, .. } = step_coeffs(t, schedule)?;
    x_t.scale(d).axpy(c, eps_pred)
}

/// Anything that predicts the noise in a state at a step.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self(x, t)
    }
}

/// States visited by a rollout, plus the noise predicted on each transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(usize, Tensor)>,
    pub predicted_noise: Vec<Tensor>,
}

impl Trajectory {
    pub fn start_step(&self) -> usize {
        self.states[0].0
    }

    pub fn last(&self) -> &Tensor {
        &self.states.last().expect("trajectory is never empty").1
    }

    /// State at step `t`, if visited.
    pub fn state_at(&self, t: usize) -> Option<&Tensor> {
        self.states.iter().find(|(s, _)| *s == t).map(|(_, x)| x)
    }
}

/// Applies `n_steps` DDIM steps starting at `t_start`.
pub fn rollout<P: NoisePredictor + ?Sized>(
    model: &P,
    x_start: &Tensor,
    t_start: usize,
    n_steps: usize,
    schedule: &NoiseSchedule,
) -> Result<Trajectory> {
    if n_steps > t_start {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n_steps} steps from t = {t_start}"
        )));
    }
    schedule.check_step(t_start)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut predicted_noise = Vec::with_capacity(n_steps);
    let mut x = x_start.clone();
    states.push((t_start, x.clone()));
    for t in (t_start - n_steps + 1..=t_start).rev() {
        let eps = model.predict(&x, t)?;
        x = ddim_step(&x, &eps, t, schedule)?;
        states.push((t - 1, x.clone()));
        predicted_noise.push(eps);
    }
    Ok(Trajectory {
        states,
        predicted_noise,
    })
}
