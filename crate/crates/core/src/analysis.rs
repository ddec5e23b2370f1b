//! Diagnostics: error accumulation over a sampling run, how much the
//! model Jacobian contributes to the per-step state gradient, a Fréchet
//! distance between sample sets, and retained-activation accounting.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationReport, GradientMode, GroupPlan};
use crate::denoiser::{Denoiser, ForwardOptions};
use crate::diffusion::{step_coeffs, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, mean_std, ordered_map, Rng, Tensor};
use crate::quantizer::{GroupQuantizerStore, SiteParams};

/// Dimension of the simulated error vectors (a 32x32 RGB image).
pub const DEFAULT_ERROR_DIM: usize = 3072;

/// Per-step magnitudes over `t = T..1` (index 0 is `t = T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub steps: Vec<usize>,
    /// `||c_t delta_t||`
    pub step_err_mean: Vec<f64>,
    pub step_err_std: Vec<f64>,
    /// `||d_t Delta_t||`
    pub accum_err_mean: Vec<f64>,
    pub accum_err_std: Vec<f64>,
    pub trials: usize,
    pub dim: usize,
    pub delta_sigma: f64,
    pub seed: u64,
}

impl ErrorTrace {
    /// `accum / step` at `t = 1`.
    pub fn final_ratio(&self) -> f64 {
        let n = self.steps.len() - 1;
        self.accum_err_mean[n] / self.step_err_mean[n]
    }

    /// Number of transitions `t -> t-1` over which the mean accumulated error grows.
    pub fn increasing_transitions(&self) -> usize {
        self.accum_err_mean
            .windows(2)
            .filter(|w| w[1] > w[0])
            .count()
    }
}

/// One run of the recursion `Delta_{t-1} = c_t delta_t + d_t Delta_t` from `Delta_T = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulationRun {
    pub step_err: Vec<f64>,
    pub accum_err: Vec<f64>,
    /// `Delta_T, ..., Delta_0`.
    pub states: Vec<Tensor>,
}

/// Iterates the recursion with given step errors; `deltas[i]` belongs to step `T - i`.
pub fn accumulate_errors(schedule: &NoiseSchedule, deltas: &[Tensor]) -> Result<AccumulationRun> {
    let steps = schedule.steps();
    if deltas.len() != steps {
        return Err(Error::ShapeMismatch {
            expected: vec![steps],
            actual: vec![deltas.len()],
        });
    }
    let mut acc = Tensor::zeros(deltas[0].shape());
    let mut run = AccumulationRun {
        step_err: Vec::with_capacity(steps),
        accum_err: Vec::with_capacity(steps),
        states: vec![acc.clone()],
    };
    for (i, delta) in deltas.iter().enumerate() {
        let k = step_coeffs(steps - i, schedule)?;
        let step = delta.scale(k.c);
        let carried = acc.scale(k.d);
        run.step_err.push(step.norm());
        run.accum_err.push(carried.norm());
        acc = step.add(&carried)?;
        run.states.push(acc.clone());
    }
    Ok(run)
}

/// Monte-Carlo magnitudes of step and accumulated error with i.i.d.
/// `N(0, delta_sigma^2 I)` step errors. Trial `i` draws from `rng.fork(i)`.
pub fn simulate_error_accumulation(
    schedule: &NoiseSchedule,
    trials: usize,
    delta_sigma: f64,
    dim: usize,
    rng: &Rng,
) -> Result<ErrorTrace> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    if !(delta_sigma > 0.0 && delta_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "delta_sigma must be positive, got {delta_sigma}"
        )));
    }
    if dim == 0 {
        return Err(Error::EmptyShape);
    }
    let steps = schedule.steps();
    let ids: Vec<u64> = (0..trials as u64).collect();
    let runs = ordered_map(&ids, |&i| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut r = rng.fork(i);
        let mut acc = Tensor::zeros(&[dim]);
        let mut step_err = Vec::with_capacity(steps);
        let mut accum_err = Vec::with_capacity(steps);
        for t in (1..=steps).rev() {
            let k = step_coeffs(t, schedule)?;
            let step = gaussian_sample(&mut r, &[dim])?.scale(delta_sigma * k.c);
            let carried = acc.scale(k.d);
            step_err.push(step.norm());
            accum_err.push(carried.norm());
            acc = step.add(&carried)?;
        }
        Ok((step_err, accum_err))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let column = |j: usize, which: usize| -> (f64, f64) {
        let v: Vec<f64> = runs
            .iter()
            .map(|(s, a)| if which == 0 { s[j] } else { a[j] })
            .collect();
        mean_std(&v)
    };
    let mut trace = ErrorTrace {
        steps: (1..=steps).rev().collect(),
        step_err_mean: Vec::with_capacity(steps),
        step_err_std: Vec::with_capacity(steps),
        accum_err_mean: Vec::with_capacity(steps),
        accum_err_std: Vec::with_capacity(steps),
        trials,
        dim,
        delta_sigma,
        seed: rng.seed(),
    };
    for j in 0..steps {
        let (m, s) = column(j, 0);
        trace.step_err_mean.push(m);
        trace.step_err_std.push(s);
        let (m, s) = column(j, 1);
        trace.accum_err_mean.push(m);
        trace.accum_err_std.push(s);
    }
    Ok(trace)
}

/// One probe of the per-step state Jacobian `d I + c J_eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceProbe {
    pub t: usize,
    /// `u^T (d I) u` for the probe's random unit direction `u`.
    pub scalar: f64,
    /// `c u^T J_eps u`.
    pub jacobian: f64,
    /// `u^T J u` with `J` the assembled full step Jacobian.
    pub full: f64,
    /// `|c| ||J_eps||_F / sqrt(dim)`, a direction-free magnitude.
    pub jacobian_frobenius: f64,
    pub direction: Tensor,
    pub full_matrix: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDominance {
    pub t: usize,
    pub probes: usize,
    pub scalar_mean: f64,
    pub scalar_std: f64,
    pub jacobian_mean: f64,
    pub jacobian_std: f64,
    pub full_mean: f64,
    pub full_std: f64,
    /// Mean of `|jacobian| / |scalar|`.
    pub ratio_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDominanceReport {
    pub probes: Vec<DominanceProbe>,
    /// Sorted by decreasing `t`.
    pub steps: Vec<StepDominance>,
}

impl GradDominanceReport {
    /// Mean `|jacobian| / |scalar|` over probes whose step satisfies `keep`.
    pub fn mean_ratio(&self, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let v: Vec<f64> = self
            .probes
            .iter()
            .filter(|p| keep(p.t))
            .map(|p| p.jacobian.abs() / p.scalar.abs())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Splits the one-step state Jacobian into its schedule term and its model
/// term at each probe `(x, t)`. With `quant`, the model is fake-quantized with
/// the group of the plan that contains `t`; otherwise it runs in full precision.
pub fn measure_grad_dominance(
    model: &Denoiser,
    quant: Option<(&GroupQuantizerStore, &GroupPlan)>,
    probes: &[(Tensor, usize)],
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<GradDominanceReport> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probes".into()));
    }
    let dim = model.dim();
    let fp = SiteParams::full_precision();
    let fp_weights = model.quantize_weights(&fp)?;
    let mut group_ctx = BTreeMap::new();
    if let Some((store, plan)) = quant {
        for (_, t) in probes {
            let g = plan.group_of_step(*t)?;
            if let std::collections::btree_map::Entry::Vacant(e) = group_ctx.entry(g) {
                let p = store.view(g)?;
                e.insert((model.quantize_weights(&p)?, p));
            }
        }
    }
    let indexed: Vec<(usize, &(Tensor, usize))> = probes.iter().enumerate().collect();
    let out = ordered_map(&indexed, |&(i, (x, t))| -> Result<DominanceProbe> {
        let t = *t;
        let k = step_coeffs(t, schedule)?;
        let (weights, params) = match quant {
            Some((_, plan)) => {
                let (w, p) = &group_ctx[&plan.group_of_step(t)?];
                (w, p)
            }
            None => (&fp_weights, &fp),
        };
        let rec = model.quantized_forward(
            weights,
            params,
            x,
            t,
            ForwardOptions {
                input_jacobian: true,
                ..Default::default()
            },
        )?;
        let jac_eps = rec.input_jacobian.expect("requested");
        if !jac_eps.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite Jacobian at probe {i} (t = {t})"
            )));
        }
        let mut r = rng.fork(i as u64);
        let raw = gaussian_sample(&mut r, &[dim])?;
        let u = raw.scale(1.0 / raw.norm());
        let full_matrix = Tensor::identity(dim).scale(k.d).axpy(k.c, &jac_eps)?;
        let scalar = k.d * u.dot(&u)?;
        let jacobian = k.c * u.dot(&jac_eps.matvec(&u)?)?;
        let full = u.dot(&full_matrix.matvec(&u)?)?;
        Ok(DominanceProbe {
            t,
            scalar,
            jacobian,
            full,
            jacobian_frobenius: k.c.abs() * jac_eps.norm() / (dim as f64).sqrt(),
            direction: u,
            full_matrix,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut by_step: BTreeMap<usize, Vec<&DominanceProbe>> = BTreeMap::new();
    for p in &out {
        by_step.entry(p.t).or_default().push(p);
    }
    let steps = by_step
        .iter()
        .rev()
        .map(|(&t, ps)| {
            let col = |f: &dyn Fn(&DominanceProbe) -> f64| {
                mean_std(&ps.iter().map(|p| f(p)).collect::<Vec<_>>())
            };
            let (scalar_mean, scalar_std) = col(&|p| p.scalar);
            let (jacobian_mean, jacobian_std) = col(&|p| p.jacobian);
            let (full_mean, full_std) = col(&|p| p.full);
            let (ratio_mean, _) = col(&|p| p.jacobian.abs() / p.scalar.abs());
            StepDominance {
                t,
                probes: ps.len(),
                scalar_mean,
                scalar_std,
                jacobian_mean,
                jacobian_std,
                full_mean,
                full_std,
                ratio_mean,
            }
        })
        .collect();
    Ok(GradDominanceReport { probes: out, steps })
}

fn moments(set: &[Tensor]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = set[0].len();
    let n = set.len();
    let mut mean = DVector::zeros(d);
    for x in set {
        if x.len() != d {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                actual: x.shape().to_vec(),
            });
        }
        mean += DVector::from_column_slice(x.data());
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in set {
        let c = DVector::from_column_slice(x.data()) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Eigenvalues of the symmetrized matrix, rejecting clearly negative ones.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -1e-9 * scale || !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{what} is not positive semi-definite (eigenvalue {bad})"
        )));
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two sample sets
/// (sample covariance with `n - 1` normalization).
pub fn frechet_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let d = a.first().map(|x| x.len()).ok_or(Error::EmptyShape)?;
    if b.first().map(|x| x.len()) != Some(d) {
        return Err(Error::ShapeMismatch {
            expected: vec![d],
            actual: b.first().map(|x| x.shape().to_vec()).unwrap_or_default(),
        });
    }
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples per set, got {} and {}",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    psd_eigen(&cov_b, "covariance of the second set")?;
    let root_a = psd_sqrt(&cov_a, "covariance of the first set")?;
    let inner = &root_a * &cov_b * &root_a;
    let cross = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let dist = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub mode: GradientMode,
    pub group_size: usize,
    /// Peak simultaneously retained intermediate tensors per calibration chain.
    pub peak_retained: usize,
    /// Retained tensors of one model call.
    pub per_call: usize,
}

/// Reads the retention counters of an instrumented calibration run.
pub fn measure_memory(model: &Denoiser, report: &CalibrationReport) -> MemoryReport {
    MemoryReport {
        mode: report.mode,
        group_size: report.group_size,
        peak_retained: report.peak_retained,
        per_call: model.retained_per_call(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::LinearDenoiser;

    #[test]
    fn hand_unrolled_recursion() {
        let s = NoiseSchedule::from_alphas(vec![0.9, 0.7, 0.4]).unwrap();
        let k2 = step_coeffs(2, &s).unwrap();
        let k1 = step_coeffs(1, &s).unwrap();
        let one = Tensor::vector(vec![1.0]);
        let run = accumulate_errors(&s, &[one.clone(), one]).unwrap();
        assert_eq!(run.states[0].data(), &[0.0]);
        assert_eq!(run.states[1].data(), &[k2.c]);
        assert_eq!(run.states[2].data(), &[k1.c + k1.d * k2.c]);
        assert_eq!(run.accum_err[0], 0.0);
        assert_eq!(run.step_err, vec![k2.c.abs(), k1.c.abs()]);
    }

    #[test]
    fn zero_step_error_stays_zero() {
        let s = NoiseSchedule::linear_beta(20, 1e-4, 0.02).unwrap();
        let run = accumulate_errors(&s, &vec![Tensor::zeros(&[3]); 20]).unwrap();
        assert!(run.states.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn simulation_shapes_and_initial_condition() {
        let s = NoiseSchedule::linear_beta(10, 1e-4, 0.02).unwrap();
        let tr = simulate_error_accumulation(&s, 8, 1.0, 16, &Rng::new(1)).unwrap();
        assert_eq!(tr.steps, (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(tr.accum_err_mean[0], 0.0);
        assert!(tr.step_err_mean.iter().all(|v| *v >= 0.0));
        assert_eq!(tr, simulate_error_accumulation(&s, 8, 1.0, 16, &Rng::new(1)).unwrap());
        assert!(simulate_error_accumulation(&s, 0, 1.0, 16, &Rng::new(1)).is_err());
        assert!(simulate_error_accumulation(&s, 1, 0.0, 16, &Rng::new(1)).is_err());
    }

    #[test]
    fn squared_accumulation_nondecreasing_when_d_exceeds_one() {
        let s = NoiseSchedule::linear_beta(30, 1e-3, 0.05).unwrap();
        let tr = simulate_error_accumulation(&s, 64, 1.0, 64, &Rng::new(2)).unwrap();
        for w in tr.accum_err_mean.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn frechet_examples() {
        let a: Vec<Tensor> = [-1.0, 0.0, 1.0].iter().map(|v| Tensor::vector(vec![*v])).collect();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let b: Vec<Tensor> = [0.0, 1.0, 2.0].iter().map(|v| Tensor::vector(vec![*v])).collect();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let r = 1.5f64.sqrt();
        let cross = |k: f64| -> Vec<Tensor> {
            [(r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)]
                .iter()
                .map(|(x, y)| Tensor::vector(vec![k * x, k * y]))
                .collect()
        };
        let fd = frechet_distance(&cross(1.0), &cross(2.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-9, "{fd}");
    }

    #[test]
    fn frechet_is_symmetric_and_checks_sizes() {
        let mut rng = Rng::new(4);
        let a: Vec<Tensor> = (0..50).map(|_| gaussian_sample(&mut rng, &[3]).unwrap()).collect();
        let b: Vec<Tensor> = (0..40)
            .map(|_| gaussian_sample(&mut rng, &[3]).unwrap().scale(1.7))
            .collect();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(frechet_distance(&a[..3], &b).is_err());
        assert!(frechet_distance(&a, &vec![Tensor::vector(vec![0.0]); 5]).is_err());
    }

    #[test]
    fn zero_weights_give_scalar_only() {
        let s = NoiseSchedule::linear_beta(10, 1e-4, 0.1).unwrap();
        let model = Denoiser::Linear(
            LinearDenoiser::new(vec![Tensor::zeros(&[2, 2]); 10], vec![Tensor::zeros(&[2]); 10])
                .unwrap(),
        );
        let probes: Vec<_> = (1..=10).map(|t| (Tensor::vector(vec![0.3, -0.1]), t)).collect();
        let rep = measure_grad_dominance(&model, None, &probes, &s, &Rng::new(0)).unwrap();
        for p in &rep.probes {
            assert_eq!(p.jacobian, 0.0);
            let d = step_coeffs(p.t, &s).unwrap().d;
            assert!((p.scalar - d).abs() < 1e-15);
            assert!((p.full - p.scalar).abs() < 1e-15);
        }
        assert_eq!(rep.steps.len(), 10);
        assert_eq!(rep.steps[0].t, 10);
        assert!(measure_grad_dominance(&model, None, &[], &s, &Rng::new(0)).is_err());
    }
}
