//! Group-wise calibration of activation step sizes.
//!
//! A sampling run of `T` steps is split into groups of `M` consecutive steps.
//! Each group gets its own activation quantizers, tuned so that the quantized
//! model's state after the whole group matches the full-precision state.
//! The gradient comes from one of two paths: the approximate path recomputes
//! one step at a time against a cached quantized sub-trajectory (constant
//! memory in `M`), the exact path chains per-step Jacobians (memory linear in
//! `M`).

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ForwardOptions, QuantizedWeights};
use crate::diffusion::{ddim_step, rollout, step_coeffs, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, gaussian_sample, ordered_map, AdamConfig, AdamState, Rng, Tensor};
use crate::quantizer::{minmax_init, GroupQuantizerStore, SiteKind, SiteParams, MIN_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Approx,
    ExactBptt,
    PerStepBaseline,
}

impl std::fmt::Display for GradientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradientMode::Approx => "approx",
            GradientMode::ExactBptt => "exact-bptt",
            GradientMode::PerStepBaseline => "per-step-baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub samples_per_group: usize,
    pub seed: u64,
    pub mode: GradientMode,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 8,
            samples_per_group: 64,
            seed: 0,
            mode: GradientMode::Approx,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.samples_per_group < self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "samples_per_group ({}) must be >= batch_size ({})",
                self.samples_per_group, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Steps `start` down to `start - len + 1`; the group ends in state `start - len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpan {
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

impl GroupSpan {
    pub fn end(&self) -> usize {
        self.start - self.len
    }

    /// Step indices in sampling order.
    pub fn steps(&self) -> impl Iterator<Item = usize> {
        (self.end() + 1..=self.start).rev()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub steps: usize,
    pub group_size: usize,
    pub groups: Vec<GroupSpan>,
    /// True when the last group is shorter than `group_size`.
    pub short_final_group: bool,
}

impl GroupPlan {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Index of the group containing step `t` (1-based step).
    pub fn group_of_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps,
            });
        }
        Ok((self.steps - t) / self.group_size)
    }
}

pub fn partition_groups(steps: usize, group_size: usize) -> Result<GroupPlan> {
    if steps == 0 {
        return Err(Error::InvalidPlan("T must be >= 1".into()));
    }
    if group_size == 0 || group_size > steps {
        return Err(Error::InvalidPlan(format!(
            "group size {group_size} outside 1..={steps}"
        )));
    }
    let n = steps.div_ceil(group_size);
    let groups = (0..n)
        .map(|l| {
            let start = steps - group_size * l;
            GroupSpan {
                index: l,
                start,
                len: group_size.min(start),
            }
        })
        .collect();
    Ok(GroupPlan {
        steps,
        group_size,
        groups,
        short_final_group: !steps.is_multiple_of(group_size),
    })
}

/// `sqrt(alpha_{t-M} / alpha_{t-m})`, the weight of inner step `m` in a group
/// starting at `t`; exactly 1 for `m == M`.
pub fn g_factor(t: usize, m: usize, group_size: usize, schedule: &NoiseSchedule) -> Result<f64> {
    if m == 0 || m > group_size {
        return Err(Error::InvalidArgument(format!(
            "inner index {m} outside 1..={group_size}"
        )));
    }
    if group_size > t || t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            step: t,
            max: schedule.steps(),
        });
    }
    if m == group_size {
        return Ok(1.0);
    }
    Ok((schedule.alpha(t - group_size) / schedule.alpha(t - m)).sqrt())
}

/// Squared L2 distance per sample, averaged over the batch.
pub fn endpoint_mse(fp: &[Tensor], quantized: &[Tensor]) -> Result<f64> {
    if fp.len() != quantized.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![fp.len()],
            actual: vec![quantized.len()],
        });
    }
    if fp.is_empty() {
        return Err(Error::EmptyShape);
    }
    let mut total = 0.0;
    for (a, b) in fp.iter().zip(quantized) {
        total += b.sub(a)?.norm_sq();
    }
    Ok(total / fp.len() as f64)
}

/// Tracks how many intermediate tensors are alive at once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetentionCounter {
    current: usize,
    peak: usize,
}

impl RetentionCounter {
    pub fn hold(&mut self, n: usize) {
        self.current += n;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, n: usize) {
        self.current = self.current.saturating_sub(n);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Loss and step-size gradient of one group pass, averaged over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradient {
    pub loss: f64,
    pub grads: BTreeMap<String, f64>,
    /// Peak intermediate tensors retained while processing one sample.
    pub peak_retained: usize,
}

struct PassContext<'a> {
    model: &'a Denoiser,
    weights: QuantizedWeights,
    params: SiteParams,
    sites: Vec<String>,
    schedule: &'a NoiseSchedule,
}

impl<'a> PassContext<'a> {
    fn new(
        model: &'a Denoiser,
        store: &GroupQuantizerStore,
        group: usize,
        schedule: &'a NoiseSchedule,
    ) -> Result<Self> {
        let params = store.view(group)?;
        Ok(Self {
            model,
            weights: model.quantize_weights(&params)?,
            params,
            sites: store.activation_sites(),
            schedule,
        })
    }

    fn predict(&self, x: &Tensor, t: usize, opts: ForwardOptions<'_>) -> Result<crate::denoiser::QuantizedForwardRecord> {
        self.model
            .quantized_forward(&self.weights, &self.params, x, t, opts)
    }

    fn with_grads(&self, jacobian: bool) -> ForwardOptions<'_> {
        ForwardOptions {
            grad_sites: &self.sites,
            input_jacobian: jacobian,
            frozen: None,
        }
    }
}

struct SampleGrad {
    loss: f64,
    grads: Vec<f64>,
    peak: usize,
}

/// Validates a batch of group sub-trajectories and returns `(start step, M)`.
fn check_trajectories(trajs: &[Trajectory], schedule: &NoiseSchedule) -> Result<(usize, usize)> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty calibration batch".into()))?;
    let start = first.start_step();
    let len = first.states.len().saturating_sub(1);
    if len == 0 || len > start || start > schedule.steps() {
        return Err(Error::InvalidPlan(format!(
            "trajectory of {len} steps from t = {start} does not describe a group"
        )));
    }
    for tr in trajs {
        let consistent = tr.states.len() == len + 1
            && tr
                .states
                .iter()
                .enumerate()
                .all(|(i, (t, _))| *t + i == start);
        if !consistent {
            return Err(Error::InvalidPlan(format!(
                "trajectories in a batch must all cover steps {start}..={}",
                start - len + 1
            )));
        }
    }
    Ok((start, len))
}

fn reduce(samples: Vec<Result<SampleGrad>>, sites: &[String]) -> Result<GroupGradient> {
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; sites.len()];
    let mut peak = 0;
    for s in samples {
        let s = s?;
        loss += s.loss;
        for (g, v) in grads.iter_mut().zip(&s.grads) {
            *g += v;
        }
        peak = peak.max(s.peak);
    }
    Ok(GroupGradient {
        loss: loss / n,
        grads: sites
            .iter()
            .cloned()
            .zip(grads.into_iter().map(|g| g / n))
            .collect(),
        peak_retained: peak,
    })
}

fn approx_sample(ctx: &PassContext<'_>, traj: &Trajectory) -> Result<SampleGrad> {
    let t = traj.start_step();
    let len = traj.states.len() - 1;
    // Cached quantized sub-trajectory, no derivatives.
    let mut cache = Vec::with_capacity(len + 1);
    cache.push(traj.states[0].1.clone());
    for m in 1..=len {
        let step = t - m + 1;
        let eps = ctx.predict(&cache[m - 1], step, ForwardOptions::default())?.output;
        cache.push(ddim_step(&cache[m - 1], &eps, step, ctx.schedule)?);
    }
    let residual = cache[len].sub(traj.last())?;

    let mut counter = RetentionCounter::default();
    let mut loss = 0.0;
    let mut grads = vec![0.0; ctx.sites.len()];
    for m in 1..=len {
        let step = t - m + 1;
        let g = g_factor(t, m, len, ctx.schedule)?;
        let coeffs = step_coeffs(step, ctx.schedule)?;
        let rec = ctx.predict(&cache[m - 1], step, ctx.with_grads(false))?;
        counter.hold(rec.retained);
        let recomputed = ddim_step(&cache[m - 1], &rec.output, step, ctx.schedule)?;
        // Value of the surrogate residual: the detached endpoint error plus a
        // zero-valued term that carries the derivative of this one step.
        let surrogate = residual.add(&recomputed.sub(&cache[m])?)?;
        loss += g * surrogate.norm_sq();
        for (k, site) in ctx.sites.iter().enumerate() {
            let dx = rec.grad_step[site].scale(coeffs.c);
            grads[k] += g * 2.0 * surrogate.dot(&dx)?;
        }
        counter.release(rec.retained);
    }
    Ok(SampleGrad {
        loss,
        grads,
        peak: counter.peak(),
    })
}

fn exact_sample(ctx: &PassContext<'_>, traj: &Trajectory) -> Result<SampleGrad> {
    let t = traj.start_step();
    let len = traj.states.len() - 1;
    let dim = ctx.model.dim();
    let mut counter = RetentionCounter::default();
    let mut records = Vec::with_capacity(len);
    let mut x = traj.states[0].1.clone();
    for m in 1..=len {
        let step = t - m + 1;
        let coeffs = step_coeffs(step, ctx.schedule)?;
        let rec = ctx.predict(&x, step, ctx.with_grads(true))?;
        counter.hold(rec.retained);
        let tangents: Vec<Tensor> = ctx
            .sites
            .iter()
            .map(|s| rec.grad_step[s].scale(coeffs.c))
            .collect();
        let jac_eps = rec.input_jacobian.as_ref().expect("requested");
        let jac = Tensor::identity(dim)
            .scale(coeffs.d)
            .axpy(coeffs.c, jac_eps)?;
        x = ddim_step(&x, &rec.output, step, ctx.schedule)?;
        records.push((tangents, jac, rec.retained));
    }
    let residual = x.sub(traj.last())?;
    let loss = residual.norm_sq();
    let mut adjoint = residual.scale(2.0);
    let mut grads = vec![0.0; ctx.sites.len()];
    for (tangents, jac, retained) in records.iter().rev() {
        for (g, v) in grads.iter_mut().zip(tangents) {
            *g += adjoint.dot(v)?;
        }
        adjoint = jac.matvec_t(&adjoint)?;
        counter.release(*retained);
    }
    Ok(SampleGrad {
        loss,
        grads,
        peak: counter.peak(),
    })
}

/// Approximate group gradient: one recomputed step at a time against a
/// cached quantized sub-trajectory, each weighted by [`g_factor`].
///
/// `fp_trajs` are full-precision sub-trajectories covering the group; their
/// first state seeds the quantized rollout and their last state is the target.
pub fn accuquant_group_pass(
    fp_trajs: &[Trajectory],
    model: &Denoiser,
    store: &GroupQuantizerStore,
    group: usize,
    schedule: &NoiseSchedule,
) -> Result<GroupGradient> {
    check_trajectories(fp_trajs, schedule)?;
    let ctx = PassContext::new(model, store, group, schedule)?;
    let samples = ordered_map(fp_trajs, |tr| approx_sample(&ctx, tr));
    reduce(samples, &ctx.sites)
}

/// Exact gradient of the group endpoint MSE by chaining straight-through
/// per-step Jacobians backwards through the group.
pub fn full_gradient_bptt(
    fp_trajs: &[Trajectory],
    model: &Denoiser,
    store: &GroupQuantizerStore,
    group: usize,
    schedule: &NoiseSchedule,
) -> Result<GroupGradient> {
    check_trajectories(fp_trajs, schedule)?;
    let ctx = PassContext::new(model, store, group, schedule)?;
    let samples = ordered_map(fp_trajs, |tr| exact_sample(&ctx, tr));
    reduce(samples, &ctx.sites)
}

/// Quantized endpoints of each sub-trajectory's group, started from its first state.
pub fn quantized_group_endpoints(
    fp_trajs: &[Trajectory],
    model: &Denoiser,
    store: &GroupQuantizerStore,
    group: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    let (start, len) = check_trajectories(fp_trajs, schedule)?;
    let ctx = PassContext::new(model, store, group, schedule)?;
    ordered_map(fp_trajs, |tr| {
        let mut x = tr.states[0].1.clone();
        for step in (start - len + 1..=start).rev() {
            let eps = ctx.predict(&x, step, ForwardOptions::default())?.output;
            x = ddim_step(&x, &eps, step, schedule)?;
        }
        Ok(x)
    })
    .into_iter()
    .collect()
}

fn group_endpoint_mse(
    fp_trajs: &[Trajectory],
    model: &Denoiser,
    store: &GroupQuantizerStore,
    group: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let q = quantized_group_endpoints(fp_trajs, model, store, group, schedule)?;
    let fp: Vec<Tensor> = fp_trajs.iter().map(|t| t.last().clone()).collect();
    endpoint_mse(&fp, &q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub start_step: usize,
    pub len: usize,
    /// Mean minibatch loss of each epoch.
    pub losses: Vec<f64>,
    pub init_endpoint_mse: f64,
    pub endpoint_mse: f64,
    pub peak_retained: usize,
    /// Not serialized so that report files stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Runs Adam over the activation step sizes of `group` only.
pub fn calibrate_group(
    model: &Denoiser,
    store: &mut GroupQuantizerStore,
    group: usize,
    fp_trajs: &[Trajectory],
    schedule: &NoiseSchedule,
    config: &CalibrationConfig,
    rng: &mut Rng,
) -> Result<GroupReport> {
    config.validate()?;
    let (start, len) = check_trajectories(fp_trajs, schedule)?;
    if fp_trajs.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} calibration samples but batch_size {}",
            fp_trajs.len(),
            config.batch_size
        )));
    }
    let clock = Instant::now();
    let sites = store.activation_sites();
    let mut params = sites
        .iter()
        .map(|s| store.get(group, s))
        .collect::<Result<Vec<_>>>()?;
    let mut steps: Vec<f64> = params.iter().map(|q| q.step).collect();
    let mut adam = AdamState::new(steps.len(), AdamConfig::with_learning_rate(config.learning_rate));
    let init_endpoint_mse = group_endpoint_mse(fp_trajs, model, store, group, schedule)?;

    let mut order: Vec<usize> = (0..fp_trajs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut peak_retained = 0;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| fp_trajs[i].clone()).collect();
            let gg = match config.mode {
                GradientMode::ExactBptt => full_gradient_bptt(&batch, model, store, group, schedule)?,
                GradientMode::Approx | GradientMode::PerStepBaseline => {
                    accuquant_group_pass(&batch, model, store, group, schedule)?
                }
            };
            let grads: Vec<f64> = sites.iter().map(|s| gg.grads[s]).collect();
            if !gg.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    context: format!("calibration of group {group}"),
                    epoch,
                });
            }
            adam_step(&mut steps, &grads, &mut adam)?;
            for ((s, q), site) in steps.iter_mut().zip(params.iter_mut()).zip(&sites) {
                *s = s.max(MIN_STEP);
                *q = q.with_step(*s);
                store.set_activation(group, site, *q)?;
            }
            peak_retained = peak_retained.max(gg.peak_retained);
            total += gg.loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    let endpoint_mse = group_endpoint_mse(fp_trajs, model, store, group, schedule)?;
    Ok(GroupReport {
        group,
        start_step: start,
        len,
        losses,
        init_endpoint_mse,
        endpoint_mse,
        peak_retained,
        wall_clock: clock.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: GradientMode,
    pub steps: usize,
    pub group_size: usize,
    pub groups: Vec<GroupReport>,
    /// Largest per-sample retention over all groups.
    pub peak_retained: usize,
    pub store: GroupQuantizerStore,
}

/// The piece of full-length trajectory `traj` that covers `span`.
pub fn group_slice(traj: &Trajectory, span: &GroupSpan) -> Result<Trajectory> {
    let offset = traj
        .start_step()
        .checked_sub(span.start)
        .filter(|o| o + span.len < traj.states.len())
        .ok_or_else(|| {
            Error::InvalidPlan(format!(
                "trajectory from t = {} does not cover group starting at {}",
                traj.start_step(),
                span.start
            ))
        })?;
    Ok(Trajectory {
        states: traj.states[offset..=offset + span.len].to_vec(),
        predicted_noise: traj.predicted_noise[offset..offset + span.len].to_vec(),
    })
}

/// Calibrates every group in order. Each group starts from full-precision
/// states taken from `fp_trajs`, never from the quantized model's output.
pub fn calibrate_all(
    model: &Denoiser,
    store: &mut GroupQuantizerStore,
    plan: &GroupPlan,
    fp_trajs: &[Trajectory],
    schedule: &NoiseSchedule,
    config: &CalibrationConfig,
) -> Result<CalibrationReport> {
    config.validate()?;
    if config.mode == GradientMode::PerStepBaseline && plan.group_size != 1 {
        return Err(Error::InvalidPlan(
            "the per-step baseline needs group size 1".into(),
        ));
    }
    if plan.steps != schedule.steps() {
        return Err(Error::InvalidPlan(format!(
            "plan has {} steps but schedule has {}",
            plan.steps,
            schedule.steps()
        )));
    }
    if store.groups() != plan.len() {
        return Err(Error::InvalidPlan(format!(
            "store has {} groups but plan has {}",
            store.groups(),
            plan.len()
        )));
    }
    if fp_trajs.len() < config.samples_per_group {
        return Err(Error::InvalidArgument(format!(
            "{} calibration trajectories, need {}",
            fp_trajs.len(),
            config.samples_per_group
        )));
    }
    let samples = &fp_trajs[..config.samples_per_group];
    let base = Rng::new(config.seed);
    let mut groups = Vec::with_capacity(plan.len());
    for span in &plan.groups {
        let sub = samples
            .iter()
            .map(|t| group_slice(t, span))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = base.fork(span.index as u64);
        groups.push(calibrate_group(
            model, store, span.index, &sub, schedule, config, &mut rng,
        )?);
    }
    Ok(CalibrationReport {
        mode: config.mode,
        steps: plan.steps,
        group_size: plan.group_size,
        peak_retained: groups.iter().map(|g| g.peak_retained).max().unwrap_or(0),
        groups,
        store: store.clone(),
    })
}

/// Prior-work control: every step calibrated on its own from error-free
/// full-precision inputs. Coincides with [`calibrate_all`] at group size 1.
pub fn calibrate_per_step_baseline(
    model: &Denoiser,
    store: &mut GroupQuantizerStore,
    fp_trajs: &[Trajectory],
    schedule: &NoiseSchedule,
    config: &CalibrationConfig,
) -> Result<CalibrationReport> {
    let plan = partition_groups(schedule.steps(), 1)?;
    let config = CalibrationConfig {
        mode: GradientMode::PerStepBaseline,
        ..*config
    };
    calibrate_all(model, store, &plan, fp_trajs, schedule, &config)
}

/// Full-precision rollouts over all `T` steps from standard-normal starts.
pub fn fp_trajectories(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    count: usize,
    rng: &Rng,
) -> Result<Vec<Trajectory>> {
    let starts = (0..count)
        .map(|i| gaussian_sample(&mut rng.fork(i as u64), &[model.dim()]))
        .collect::<Result<Vec<_>>>()?;
    ordered_map(&starts, |x| rollout(model, x, schedule.steps(), schedule.steps(), schedule))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitWidths {
    pub weight: u32,
    pub activation: u32,
}

/// Min-max initialization: symmetric per weight site over all weights,
/// asymmetric per activation site and group over the full-precision
/// activations seen along `fp_trajs` inside that group.
pub fn init_store(
    model: &Denoiser,
    plan: &GroupPlan,
    fp_trajs: &[Trajectory],
    bits: BitWidths,
) -> Result<GroupQuantizerStore> {
    let mut store = GroupQuantizerStore::new(model.sites(), plan.len());
    for site in model.sites() {
        if site.kind == SiteKind::Weight {
            let init = minmax_init(&model.weight_values(&site.id)?, bits.weight, true)?;
            store.set_weight(&site.id, init.params)?;
        }
    }
    for span in &plan.groups {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for traj in fp_trajs {
            for step in span.steps() {
                let x = traj.state_at(step).ok_or_else(|| {
                    Error::InvalidPlan(format!("trajectory does not visit step {step}"))
                })?;
                for (site, v) in model.activation_samples(x, step)? {
                    values.entry(site).or_default().extend(v);
                }
            }
        }
        for (site, v) in values {
            let init = minmax_init(&v, bits.activation, false)?;
            store.set_activation(span.index, &site, init.params)?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::LinearDenoiser;
    use crate::quantizer::QuantizerParams;

    #[test]
    fn partition_examples() {
        let p = partition_groups(100, 5).unwrap();
        assert_eq!(p.len(), 20);
        assert_eq!(p.groups[0].steps().collect::<Vec<_>>(), vec![100, 99, 98, 97, 96]);
        assert!(!p.short_final_group);

        let p = partition_groups(10, 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.groups[0].end(), 0);

        let p = partition_groups(50, 3).unwrap();
        assert_eq!(p.len(), 17);
        assert!(p.groups[..16].iter().all(|g| g.len == 3));
        assert_eq!(p.groups[16].len, 2);
        assert!(p.short_final_group);

        assert!(partition_groups(5, 6).is_err());
        assert!(partition_groups(5, 0).is_err());
    }

    #[test]
    fn plan_covers_every_step_once() {
        for (t, m) in [(100, 5), (50, 3), (7, 7), (9, 4), (1, 1)] {
            let p = partition_groups(t, m).unwrap();
            let mut seen: Vec<usize> = p.groups.iter().flat_map(|g| g.steps()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (1..=t).collect::<Vec<_>>());
            for g in &p.groups {
                assert_eq!(g.start, t - m * g.index);
                for s in g.steps() {
                    assert_eq!(p.group_of_step(s).unwrap(), g.index);
                }
            }
        }
    }

    #[test]
    fn g_factor_examples() {
        let s = NoiseSchedule::from_alphas(vec![0.64, 0.25, 0.16]).unwrap();
        assert_eq!(g_factor(2, 1, 2, &s).unwrap(), 1.6);
        assert_eq!(g_factor(2, 1, 1, &s).unwrap(), 1.0);
        assert_eq!(g_factor(2, 2, 2, &s).unwrap(), 1.0);
        assert!(g_factor(2, 3, 2, &s).is_err());
        assert!(g_factor(2, 0, 2, &s).is_err());
        assert!(g_factor(1, 1, 2, &s).is_err());
    }

    #[test]
    fn endpoint_mse_examples() {
        let a = vec![Tensor::vector(vec![1.0, 2.0])];
        assert_eq!(endpoint_mse(&a, &a).unwrap(), 0.0);
        let b = vec![Tensor::vector(vec![4.0, 6.0])];
        assert_eq!(endpoint_mse(&a, &b).unwrap(), 25.0);
        assert!(endpoint_mse(&a, &[]).is_err());
        assert!(endpoint_mse(&a, &[Tensor::vector(vec![1.0])]).is_err());
    }

    #[test]
    fn retention_counter_tracks_peak() {
        let mut c = RetentionCounter::default();
        c.hold(2);
        c.hold(3);
        c.release(5);
        c.hold(1);
        assert_eq!(c.peak(), 5);
    }

    fn linear_setup(bits: u32, step: f64) -> (Denoiser, NoiseSchedule, GroupQuantizerStore, Vec<Trajectory>) {
        let schedule = NoiseSchedule::linear_beta(6, 1e-3, 0.2).unwrap();
        let mut rng = Rng::new(11);
        let model = Denoiser::Linear(LinearDenoiser::random(3, 6, 0.8, &mut rng).unwrap());
        let mut store = GroupQuantizerStore::new(model.sites(), 2);
        let q = QuantizerParams::new(step, 1i64 << (bits - 1), bits).unwrap();
        store.set_weight("weight", q).unwrap();
        for g in 0..2 {
            for s in model.activation_sites() {
                store.set_activation(g, &s, q).unwrap();
            }
        }
        let trajs = fp_trajectories(&model, &schedule, 4, &rng).unwrap();
        (model, schedule, store, trajs)
    }

    #[test]
    fn full_precision_limit_has_zero_loss() {
        let (model, schedule, store, trajs) = linear_setup(32, 1e-8);
        let plan = partition_groups(6, 3).unwrap();
        let sub: Vec<_> = trajs.iter().map(|t| group_slice(t, &plan.groups[0]).unwrap()).collect();
        let gg = accuquant_group_pass(&sub, &model, &store, 0, &schedule).unwrap();
        assert!(gg.loss < 1e-12);
        assert!(gg.grads.values().all(|g| g.abs() < 1e-3));
    }

    #[test]
    fn single_step_group_matches_exact_gradient() {
        let (model, schedule, store, trajs) = linear_setup(4, 0.2);
        let plan = partition_groups(6, 1).unwrap();
        let sub: Vec<_> = trajs.iter().map(|t| group_slice(t, &plan.groups[2]).unwrap()).collect();
        let a = accuquant_group_pass(&sub, &model, &store, 1, &schedule).unwrap();
        let e = full_gradient_bptt(&sub, &model, &store, 1, &schedule).unwrap();
        assert!((a.loss - e.loss).abs() <= 1e-14 * e.loss.max(1.0));
        for (k, v) in &a.grads {
            assert!((v - e.grads[k]).abs() <= 1e-12 * v.abs().max(1e-12));
        }
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let (model, schedule, store, trajs) = linear_setup(4, 0.2);
        let plan = partition_groups(6, 3).unwrap();
        let a = group_slice(&trajs[0], &plan.groups[0]).unwrap();
        let b = group_slice(&trajs[1], &plan.groups[1]).unwrap();
        assert!(matches!(
            accuquant_group_pass(&[a, b], &model, &store, 0, &schedule),
            Err(Error::InvalidPlan(_))
        ));
        assert!(accuquant_group_pass(&[], &model, &store, 0, &schedule).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_steps() {
        let (model, schedule, mut store, trajs) = linear_setup(4, 0.2);
        let before = store.clone();
        let plan = partition_groups(6, 3).unwrap();
        let config = CalibrationConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 2,
            samples_per_group: 4,
            ..Default::default()
        };
        let report = calibrate_all(&model, &mut store, &plan, &trajs, &schedule, &config).unwrap();
        assert_eq!(store, before);
        for g in &report.groups {
            for l in &g.losses {
                assert!((l - g.losses[0]).abs() <= 1e-12 * g.losses[0].abs().max(1e-300));
            }
            assert_eq!(g.init_endpoint_mse, g.endpoint_mse);
        }
    }

    #[test]
    fn calibrating_one_group_leaves_others_alone() {
        let (model, schedule, mut store, trajs) = linear_setup(4, 0.2);
        let before = store.clone();
        let plan = partition_groups(6, 3).unwrap();
        let sub: Vec<_> = trajs.iter().map(|t| group_slice(t, &plan.groups[1]).unwrap()).collect();
        let config = CalibrationConfig {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 2,
            samples_per_group: 4,
            ..Default::default()
        };
        calibrate_group(&model, &mut store, 1, &sub, &schedule, &config, &mut Rng::new(0)).unwrap();
        assert_eq!(store.view(0).unwrap(), before.view(0).unwrap());
        assert_ne!(store.view(1).unwrap(), before.view(1).unwrap());
    }

    #[test]
    fn nan_loss_reports_epoch() {
        let (model, schedule, mut store, trajs) = linear_setup(4, 0.2);
        let Denoiser::Linear(mut lin) = model else { unreachable!() };
        lin.biases[4] = Tensor::vector(vec![f64::NAN; 3]);
        let model = Denoiser::Linear(lin);
        let plan = partition_groups(6, 3).unwrap();
        let sub: Vec<_> = trajs.iter().map(|t| group_slice(t, &plan.groups[0]).unwrap()).collect();
        let config = CalibrationConfig {
            epochs: 2,
            batch_size: 2,
            samples_per_group: 4,
            ..Default::default()
        };
        let err = calibrate_group(&model, &mut store, 0, &sub, &schedule, &config, &mut Rng::new(0));
        assert!(matches!(err, Err(Error::Diverged { epoch: 0, .. })), "{err:?}");
    }

    #[test]
    fn baseline_equals_group_size_one() {
        let (model, schedule, _, trajs) = linear_setup(4, 0.2);
        let plan = partition_groups(6, 1).unwrap();
        let bits = BitWidths {
            weight: 4,
            activation: 6,
        };
        let init = init_store(&model, &plan, &trajs, bits).unwrap();
        let config = CalibrationConfig {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 2,
            samples_per_group: 4,
            ..Default::default()
        };
        let mut a = init.clone();
        let ra = calibrate_per_step_baseline(&model, &mut a, &trajs, &schedule, &config).unwrap();
        let mut b = init;
        let rb = calibrate_all(&model, &mut b, &plan, &trajs, &schedule, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&ra.groups).unwrap(),
            serde_json::to_string(&rb.groups).unwrap()
        );
        assert!(calibrate_all(
            &model,
            &mut b,
            &partition_groups(6, 2).unwrap(),
            &trajs,
            &schedule,
            &CalibrationConfig {
                mode: GradientMode::PerStepBaseline,
                ..config
            }
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig::default().validate().is_ok());
        let bad = CalibrationConfig {
            samples_per_group: 4,
            batch_size: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = serde_json::json!({"mode": "exact-bptt", "epochs": 3});
        let cfg: CalibrationConfig = serde_json::from_value(json).unwrap();
        assert_eq!(cfg.mode, GradientMode::ExactBptt);
        assert!(serde_json::from_value::<CalibrationConfig>(serde_json::json!({"epoch": 3})).is_err());
    }
}
