//! Browser bindings: error accumulation, the fake-quantizer transfer curve and
//! per-group step weights. Every call returns a JSON string.

use accuquant::analysis::simulate_error_accumulation;
use accuquant::calibration::{g_factor, partition_groups};
use accuquant::diffusion::{step_coeffs, NoiseSchedule};
use accuquant::quantizer::{fake_quant, QuantizerParams};
use accuquant::{Rng, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Demo sizes are capped so a click never stalls the page.
const MAX_STEPS: usize = 1000;
const MAX_WORK: usize = 20_000_000;
const MAX_POINTS: usize = 10_000;

fn schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, String> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    NoiseSchedule::linear_beta(steps, beta_start, beta_end).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct AccumulationView {
    t: Vec<usize>,
    step_err: Vec<f64>,
    accum_err: Vec<f64>,
    final_ratio: f64,
    increasing_transitions: usize,
}

pub fn error_accumulation_json(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    trials: usize,
    dim: usize,
    seed: u64,
) -> Result<String, String> {
    let s = schedule(steps, beta_start, beta_end)?;
    if trials.saturating_mul(dim).saturating_mul(steps) > MAX_WORK {
        return Err("trials * dim * steps is too large for the demo".into());
    }
    let trace = simulate_error_accumulation(&s, trials, 1.0, dim, &Rng::new(seed))
        .map_err(|e| e.to_string())?;
    to_json(&AccumulationView {
        final_ratio: trace.final_ratio(),
        increasing_transitions: trace.increasing_transitions(),
        t: trace.steps,
        step_err: trace.step_err_mean,
        accum_err: trace.accum_err_mean,
    })
}

#[derive(Serialize)]
struct CurveView {
    v: Vec<f64>,
    v_hat: Vec<f64>,
    grad_step: Vec<f64>,
    range: (f64, f64),
}

pub fn fake_quant_curve_json(
    step: f64,
    zero_point: i64,
    bits: u32,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, String> {
    let q = QuantizerParams::new(step, zero_point, bits).map_err(|e| e.to_string())?;
    if !(points >= 2 && points <= MAX_POINTS && lo < hi) {
        return Err(format!("need lo < hi and 2..={MAX_POINTS} points"));
    }
    let v: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    let fq = fake_quant(&Tensor::vector(v.clone()), &q);
    to_json(&CurveView {
        v,
        v_hat: fq.values.into_data(),
        grad_step: fq.grad_step.into_data(),
        range: q.range(),
    })
}

#[derive(Serialize)]
struct GroupView {
    index: usize,
    start: usize,
    /// Steps `start, start - 1, ...` of the group.
    steps: Vec<usize>,
    weights: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

pub fn group_weights_json(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    group_size: usize,
) -> Result<String, String> {
    let s = schedule(steps, beta_start, beta_end)?;
    let plan = partition_groups(steps, group_size).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(plan.len());
    for g in &plan.groups {
        let mut view = GroupView {
            index: g.index,
            start: g.start,
            steps: Vec::new(),
            weights: Vec::new(),
            c: Vec::new(),
            d: Vec::new(),
        };
        for (i, t) in g.steps().enumerate() {
            let k = step_coeffs(t, &s).map_err(|e| e.to_string())?;
            view.steps.push(t);
            view.weights
                .push(g_factor(g.start, i + 1, g.len, &s).map_err(|e| e.to_string())?);
            view.c.push(k.c);
            view.d.push(k.d);
        }
        out.push(view);
    }
    to_json(&out)
}

#[wasm_bindgen]
pub fn error_accumulation(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    trials: usize,
    dim: usize,
    seed: u32,
) -> Result<String, JsError> {
    error_accumulation_json(steps, beta_start, beta_end, trials, dim, seed.into())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fake_quant_curve(
    step: f64,
    zero_point: i32,
    bits: u32,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, JsError> {
    fake_quant_curve_json(step, zero_point.into(), bits, lo, hi, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn group_weights(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    group_size: usize,
) -> Result<String, JsError> {
    group_weights_json(steps, beta_start, beta_end, group_size).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn accumulation_shape() {
        let v: Value =
            serde_json::from_str(&error_accumulation_json(50, 1e-4, 0.02, 8, 16, 1).unwrap())
                .unwrap();
        assert_eq!(v["t"].as_array().unwrap().len(), 50);
        assert!(v["final_ratio"].as_f64().unwrap() > 1.0);
    }

    #[test]
    fn curve_clips_at_rails() {
        let v: Value =
            serde_json::from_str(&fake_quant_curve_json(0.1, 0, 4, -1.0, 2.0, 31).unwrap())
                .unwrap();
        let vhat = v["v_hat"].as_array().unwrap();
        assert_eq!(vhat[0].as_f64().unwrap(), 0.0);
        assert!((vhat[30].as_f64().unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(v["grad_step"][30].as_f64().unwrap(), 15.0);
    }

    #[test]
    fn last_weight_is_one() {
        let v: Value =
            serde_json::from_str(&group_weights_json(12, 1e-4, 0.02, 5).unwrap()).unwrap();
        let groups = v.as_array().unwrap();
        assert_eq!(groups.len(), 3);
        for g in groups {
            let w = g["weights"].as_array().unwrap();
            assert_eq!(w.last().unwrap().as_f64().unwrap(), 1.0);
            assert!(w.iter().all(|x| x.as_f64().unwrap() >= 1.0));
        }
        assert_eq!(groups[2]["steps"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(fake_quant_curve_json(0.0, 0, 4, -1.0, 1.0, 10).is_err());
        assert!(group_weights_json(10, 1e-4, 0.02, 11).is_err());
        assert!(error_accumulation_json(0, 1e-4, 0.02, 1, 1, 0).is_err());
    }
}
