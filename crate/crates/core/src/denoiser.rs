//! Noise predictors and their fake-quantized forward passes.
//!
//! Two model tiers share one quantized forward engine: an affine per-step
//! [`LinearDenoiser`] whose input Jacobian is known in closed form, and a small
//! tanh [`MlpDenoiser`] trained on 2-D toy data. The quantized forward pass
//! carries forward-mode tangents for the activation step sizes being
//! calibrated and, on request, for the input state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, gaussian_sample, AdamConfig, AdamState, Rng, Tensor};
use crate::quantizer::{
    fake_quant, fake_quant_frozen, GroupQuantizerStore, Rounding, SiteKind,
    SiteParams, SiteSpec,
};

pub const SITE_INPUT: &str = "input";
pub const SITE_OUTPUT: &str = "output";
pub const SITE_HIDDEN1: &str = "hidden1";
pub const SITE_HIDDEN2: &str = "hidden2";
pub const SITE_WEIGHT: &str = "weight";
pub const SITE_W1: &str = "w1";
pub const SITE_W2: &str = "w2";
pub const SITE_W3: &str = "w3";

/// Affine noise predictor `W_t x + b_t`, one pair per step `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDenoiser {
    pub dim: usize,
    /// `weights[t - 1]` is `W_t`.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl LinearDenoiser {
    pub fn new(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let dim = biases.first().map(|b| b.len()).ok_or_else(|| {
            Error::InvalidArgument("linear denoiser needs at least one step".into())
        })?;
        if weights.len() != biases.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weight matrices but {} biases",
                weights.len(),
                biases.len()
            )));
        }
        for (w, b) in weights.iter().zip(&biases) {
            if w.shape() != [dim, dim] || b.shape() != [dim] {
                return Err(Error::ShapeMismatch {
                    expected: vec![dim, dim],
                    actual: w.shape().to_vec(),
                });
            }
            if !w.all_finite() || !b.all_finite() {
                return Err(Error::InvalidArgument("non-finite linear denoiser parameters".into()));
            }
        }
        Ok(Self {
            dim,
            weights,
            biases,
        })
    }

    /// Random model whose weights have entries of scale `weight_scale / sqrt(dim)`.
    pub fn random(dim: usize, steps: usize, weight_scale: f64, rng: &mut Rng) -> Result<Self> {
        let k = weight_scale / (dim as f64).sqrt();
        let mut weights = Vec::with_capacity(steps);
        let mut biases = Vec::with_capacity(steps);
        for _ in 0..steps {
            weights.push(gaussian_sample(rng, &[dim, dim])?.scale(k));
            biases.push(gaussian_sample(rng, &[dim])?.scale(0.1));
        }
        Self::new(weights, biases)
    }

    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn jacobian(&self, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        Ok(self.weights[t - 1].clone())
    }
}

/// `W_t x + b_t`.
pub fn linear_predict(m: &LinearDenoiser, x: &Tensor, t: usize) -> Result<Tensor> {
    m.check_step(t)?;
    m.weights[t - 1].matvec(x)?.add(&m.biases[t - 1])
}

/// Exact input Jacobian of [`linear_predict`]: `W_t`.
pub fn linear_jacobian(m: &LinearDenoiser, t: usize) -> Result<Tensor> {
    m.jacobian(t)
}

/// Two tanh hidden layers over `[x, sinusoidal(t)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDenoiser {
    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl MlpDenoiser {
    pub fn zeros(dim: usize, hidden: usize, embed: usize) -> Self {
        Self {
            dim,
            hidden,
            embed,
            w1: Tensor::zeros(&[hidden, dim + embed]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            w3: Tensor::zeros(&[dim, hidden]),
            b3: Tensor::zeros(&[dim]),
        }
    }

    pub fn random(dim: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 || !embed.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "invalid MLP shape (dim {dim}, hidden {hidden}, embed {embed}); embed must be even"
            )));
        }
        let mut m = Self::zeros(dim, hidden, embed);
        let init = |rng: &mut Rng, rows: usize, cols: usize| -> Result<Tensor> {
            Ok(gaussian_sample(rng, &[rows, cols])?.scale(1.0 / (cols as f64).sqrt()))
        };
        m.w1 = init(rng, hidden, dim + embed)?;
        m.w2 = init(rng, hidden, hidden)?;
        m.w3 = init(rng, dim, hidden)?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let expect = [
            (&self.w1, vec![self.hidden, self.dim + self.embed]),
            (&self.b1, vec![self.hidden]),
            (&self.w2, vec![self.hidden, self.hidden]),
            (&self.b2, vec![self.hidden]),
            (&self.w3, vec![self.dim, self.hidden]),
            (&self.b3, vec![self.dim]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::InvalidArgument("non-finite MLP parameter".into()));
            }
        }
        if !self.embed.is_multiple_of(2) {
            return Err(Error::InvalidArgument("embedding width must be even".into()));
        }
        Ok(())
    }

    fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                expected: vec![total],
                actual: vec![flat.len()],
            });
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// `[sin(t f_k), cos(t f_k)]` with `f_k = 10000^(-k / (width / 2))`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

pub fn mlp_predict(m: &MlpDenoiser, x: &Tensor, t: usize) -> Result<Tensor> {
    if x.len() != m.dim {
        return Err(Error::ShapeMismatch {
            expected: vec![m.dim],
            actual: x.shape().to_vec(),
        });
    }
    let mut input = x.data().to_vec();
    input.extend(time_embedding(t, m.embed));
    let a1 = m.w1.matvec(&Tensor::vector(input))?.add(&m.b1)?.map(f64::tanh);
    let a2 = m.w2.matvec(&a1)?.add(&m.b2)?.map(f64::tanh);
    m.w3.matvec(&a2)?.add(&m.b3)
}

/// Either model tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Denoiser {
    Linear(LinearDenoiser),
    Mlp(MlpDenoiser),
}

impl NoisePredictor for LinearDenoiser {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        linear_predict(self, x, t)
    }
}

impl NoisePredictor for MlpDenoiser {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        mlp_predict(self, x, t)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        match self {
            Denoiser::Linear(m) => linear_predict(m, x, t),
            Denoiser::Mlp(m) => mlp_predict(m, x, t),
        }
    }
}

/// Fake-quantized copies of a model's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    matrices: Vec<Tensor>,
}

/// Options for [`Denoiser::quantized_forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Activation sites whose step-size derivative should be carried.
    pub grad_sites: &'a [String],
    /// Also compute the straight-through Jacobian of the output in the input.
    pub input_jacobian: bool,
    /// Replay these rounding patterns at activation sites instead of rounding afresh.
    pub frozen: Option<&'a BTreeMap<String, Vec<Rounding>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedForwardRecord {
    pub output: Tensor,
    /// `d output / d s` for each requested site.
    pub grad_step: BTreeMap<String, Tensor>,
    /// `d output / d input` (rows index outputs) when requested.
    pub input_jacobian: Option<Tensor>,
    /// Rounding pattern of every quantized activation site.
    pub patterns: BTreeMap<String, Vec<Rounding>>,
    /// Intermediate tensors a backward pass through this call would keep.
    pub retained: usize,
}

/// Value plus forward-mode tangents; `None` marks an identically-zero tangent.
struct Dual {
    value: Vec<f64>,
    tangents: Vec<Option<Vec<f64>>>,
}

impl Dual {
    fn affine(&mut self, w: &Tensor, b: Option<&Tensor>) {
        let (rows, cols) = (w.rows(), w.cols());
        let wd = w.data();
        let apply = |v: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|i| {
                    wd[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(v)
                        .map(|(a, x)| a * x)
                        .sum()
                })
                .collect()
        };
        let mut value = apply(&self.value);
        if let Some(b) = b {
            for (v, bb) in value.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.value = value;
        for t in self.tangents.iter_mut().flatten() {
            *t = apply(t);
        }
    }

    fn tanh(&mut self) {
        for v in &mut self.value {
            *v = v.tanh();
        }
        let value = &self.value;
        for t in self.tangents.iter_mut().flatten() {
            for (ti, a) in t.iter_mut().zip(value) {
                *ti *= 1.0 - a * a;
            }
        }
    }

    /// Appends constant entries (zero tangent).
    fn extend_const(&mut self, extra: &[f64]) {
        self.value.extend_from_slice(extra);
        for t in self.tangents.iter_mut().flatten() {
            t.extend(std::iter::repeat_n(0.0, extra.len()));
        }
    }
}

/// Tangent slots: one per requested grad site, then one per input coordinate.
struct Engine<'a> {
    params: &'a SiteParams,
    opts: ForwardOptions<'a>,
    patterns: BTreeMap<String, Vec<Rounding>>,
}

impl<'a> Engine<'a> {
    fn start(&self, x: &Tensor) -> Dual {
        let d = x.len();
        let mut tangents: Vec<Option<Vec<f64>>> = vec![None; self.opts.grad_sites.len()];
        if self.opts.input_jacobian {
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                tangents.push(Some(e));
            }
        }
        Dual {
            value: x.data().to_vec(),
            tangents,
        }
    }

    fn activation_site(&mut self, site: &str, dual: &mut Dual) -> Result<()> {
        let Some(q) = self.params.get(site)? else {
            return Ok(());
        };
        let v = Tensor::vector(std::mem::take(&mut dual.value));
        let fq = fake_quant(&v, &q);
        let (values, pattern) = match self.opts.frozen.and_then(|f| f.get(site)) {
            Some(p) => (fake_quant_frozen(&v, &q, p)?, p.clone()),
            None => (fq.values, fq.pattern),
        };
        let grad_input: Vec<f64> = pattern
            .iter()
            .map(|p| match p {
                Rounding::InRange { .. } => 1.0,
                Rounding::Clipped { .. } => 0.0,
            })
            .collect();
        for t in dual.tangents.iter_mut().flatten() {
            for (ti, g) in t.iter_mut().zip(&grad_input) {
                *ti *= g;
            }
        }
        if let Some(slot) = self.opts.grad_sites.iter().position(|s| s == site) {
            let gs = pattern
                .iter()
                .map(|p| match *p {
                    Rounding::InRange { offset } => offset,
                    Rounding::Clipped { level } => (level - q.zero_point) as f64,
                })
                .collect();
            dual.tangents[slot] = Some(gs);
        }
        dual.value = values.into_data();
        self.patterns.insert(site.to_string(), pattern);
        Ok(())
    }

    fn finish(self, dual: Dual, retained: usize) -> QuantizedForwardRecord {
        let n_sites = self.opts.grad_sites.len();
        let d_out = dual.value.len();
        let mut grad_step = BTreeMap::new();
        let mut tangents = dual.tangents.into_iter();
        for site in self.opts.grad_sites {
            let t = tangents.next().flatten().unwrap_or_else(|| vec![0.0; d_out]);
            grad_step.insert(site.clone(), Tensor::vector(t));
        }
        let input_jacobian = self.opts.input_jacobian.then(|| {
            let cols: Vec<Vec<f64>> = tangents
                .map(|t| t.unwrap_or_else(|| vec![0.0; d_out]))
                .collect();
            let d_in = cols.len();
            let mut jac = Tensor::zeros(&[d_out, d_in]);
            for (j, col) in cols.iter().enumerate() {
                for (i, v) in col.iter().enumerate() {
                    jac.set(i, j, *v);
                }
            }
            jac
        });
        debug_assert_eq!(grad_step.len(), n_sites);
        QuantizedForwardRecord {
            output: Tensor::vector(dual.value),
            grad_step,
            input_jacobian,
            patterns: self.patterns,
            retained,
        }
    }
}

/// Per-call retained tensors for the linear tier: quantized input and pre-output.
pub const LINEAR_RETAINED_PER_CALL: usize = 2;
/// Per-call retained tensors for the MLP: quantized input, both pre-activations
/// and both quantized hidden activations.
pub const MLP_RETAINED_PER_CALL: usize = 5;

impl Denoiser {
    pub fn dim(&self) -> usize {
        match self {
            Denoiser::Linear(m) => m.dim,
            Denoiser::Mlp(m) => m.dim,
        }
    }

    /// Highest step the model accepts, if bounded.
    pub fn max_step(&self) -> Option<usize> {
        match self {
            Denoiser::Linear(m) => Some(m.steps()),
            Denoiser::Mlp(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Denoiser::Linear(m) => {
                LinearDenoiser::new(m.weights.clone(), m.biases.clone()).map(|_| ())
            }
            Denoiser::Mlp(m) => m.validate(),
        }
    }

    /// Quantization sites, weights first.
    pub fn sites(&self) -> Vec<SiteSpec> {
        match self {
            Denoiser::Linear(_) => vec![
                SiteSpec::weight(SITE_WEIGHT),
                SiteSpec::activation(SITE_INPUT),
                SiteSpec::activation(SITE_OUTPUT),
            ],
            Denoiser::Mlp(_) => vec![
                SiteSpec::weight(SITE_W1),
                SiteSpec::weight(SITE_W2),
                SiteSpec::weight(SITE_W3),
                SiteSpec::activation(SITE_INPUT),
                SiteSpec::activation(SITE_HIDDEN1),
                SiteSpec::activation(SITE_HIDDEN2),
            ],
        }
    }

    pub fn activation_sites(&self) -> Vec<String> {
        self.sites()
            .into_iter()
            .filter(|s| s.kind == SiteKind::Activation)
            .map(|s| s.id)
            .collect()
    }

    pub fn retained_per_call(&self) -> usize {
        match self {
            Denoiser::Linear(_) => LINEAR_RETAINED_PER_CALL,
            Denoiser::Mlp(_) => MLP_RETAINED_PER_CALL,
        }
    }

    /// Raw values quantized at weight site `site`.
    pub fn weight_values(&self, site: &str) -> Result<Vec<f64>> {
        match (self, site) {
            (Denoiser::Linear(m), SITE_WEIGHT) => Ok(m
                .weights
                .iter()
                .flat_map(|w| w.data().iter().copied())
                .collect()),
            (Denoiser::Mlp(m), SITE_W1) => Ok(m.w1.data().to_vec()),
            (Denoiser::Mlp(m), SITE_W2) => Ok(m.w2.data().to_vec()),
            (Denoiser::Mlp(m), SITE_W3) => Ok(m.w3.data().to_vec()),
            _ => Err(Error::UnknownSite(site.to_string())),
        }
    }

    /// Fake-quantizes every weight tensor with the view's weight parameters.
    pub fn quantize_weights(&self, params: &SiteParams) -> Result<QuantizedWeights> {
        let q = |w: &Tensor, site: &str| -> Result<Tensor> {
            Ok(match params.get(site)? {
                Some(p) => fake_quant(w, &p).values,
                None => w.clone(),
            })
        };
        let matrices = match self {
            Denoiser::Linear(m) => m
                .weights
                .iter()
                .map(|w| q(w, SITE_WEIGHT))
                .collect::<Result<Vec<_>>>()?,
            Denoiser::Mlp(m) => vec![q(&m.w1, SITE_W1)?, q(&m.w2, SITE_W2)?, q(&m.w3, SITE_W3)?],
        };
        Ok(QuantizedWeights { matrices })
    }

    /// Fake-quantized forward pass with pre-quantized weights.
    pub fn quantized_forward(
        &self,
        weights: &QuantizedWeights,
        params: &SiteParams,
        x: &Tensor,
        t: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<QuantizedForwardRecord> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.dim()],
                actual: x.shape().to_vec(),
            });
        }
        let active = self.activation_sites();
        for site in opts.grad_sites {
            if !active.contains(site) {
                return Err(Error::UnknownSite(site.clone()));
            }
        }
        let mut engine = Engine {
            params,
            opts,
            patterns: BTreeMap::new(),
        };
        let mut dual = engine.start(x);
        match self {
            Denoiser::Linear(m) => {
                m.check_step(t)?;
                engine.activation_site(SITE_INPUT, &mut dual)?;
                dual.affine(&weights.matrices[t - 1], Some(&m.biases[t - 1]));
                engine.activation_site(SITE_OUTPUT, &mut dual)?;
                Ok(engine.finish(dual, LINEAR_RETAINED_PER_CALL))
            }
            Denoiser::Mlp(m) => {
                engine.activation_site(SITE_INPUT, &mut dual)?;
                dual.extend_const(&time_embedding(t, m.embed));
                dual.affine(&weights.matrices[0], Some(&m.b1));
                dual.tanh();
                engine.activation_site(SITE_HIDDEN1, &mut dual)?;
                dual.affine(&weights.matrices[1], Some(&m.b2));
                dual.tanh();
                engine.activation_site(SITE_HIDDEN2, &mut dual)?;
                dual.affine(&weights.matrices[2], Some(&m.b3));
                Ok(engine.finish(dual, MLP_RETAINED_PER_CALL))
            }
        }
    }

    /// Full-precision values observed at each activation site.
    pub fn activation_samples(&self, x: &Tensor, t: usize) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        match self {
            Denoiser::Linear(m) => {
                out.insert(SITE_INPUT.to_string(), x.data().to_vec());
                out.insert(SITE_OUTPUT.to_string(), linear_predict(m, x, t)?.into_data());
            }
            Denoiser::Mlp(m) => {
                let mut input = x.data().to_vec();
                input.extend(time_embedding(t, m.embed));
                let a1 = m.w1.matvec(&Tensor::vector(input))?.add(&m.b1)?.map(f64::tanh);
                let a2 = m.w2.matvec(&a1)?.add(&m.b2)?.map(f64::tanh);
                out.insert(SITE_INPUT.to_string(), x.data().to_vec());
                out.insert(SITE_HIDDEN1.to_string(), a1.into_data());
                out.insert(SITE_HIDDEN2.to_string(), a2.into_data());
            }
        }
        Ok(out)
    }

    /// Straight-through input Jacobian of the full-precision model.
    pub fn input_jacobian(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let fp = SiteParams::full_precision();
        let w = self.quantize_weights(&fp)?;
        let rec = self.quantized_forward(
            &w,
            &fp,
            x,
            t,
            ForwardOptions {
                input_jacobian: true,
                ..Default::default()
            },
        )?;
        Ok(rec.input_jacobian.expect("requested"))
    }
}

/// One quantized prediction using group `group` of `store`, recording step-size
/// derivatives for every activation site of that group.
pub fn quantized_predict(
    model: &Denoiser,
    store: &GroupQuantizerStore,
    group: usize,
    x: &Tensor,
    t: usize,
) -> Result<QuantizedForwardRecord> {
    let params = store.view(group)?;
    for site in model.sites() {
        params.get(&site.id)?;
    }
    let weights = model.quantize_weights(&params)?;
    let sites = store.activation_sites();
    model.quantized_forward(
        &weights,
        &params,
        x,
        t,
        ForwardOptions {
            grad_sites: &sites,
            ..Default::default()
        },
    )
}

/// A quantized model bound to per-step parameters, usable for rollouts.
pub struct QuantizedModel<'a> {
    model: &'a Denoiser,
    per_group: Vec<(QuantizedWeights, SiteParams)>,
    group_of_step: Box<dyn Fn(usize) -> usize + Send + Sync + 'a>,
}

impl<'a> QuantizedModel<'a> {
    pub fn new(
        model: &'a Denoiser,
        store: &GroupQuantizerStore,
        group_of_step: impl Fn(usize) -> usize + Send + Sync + 'a,
    ) -> Result<Self> {
        let mut per_group = Vec::with_capacity(store.groups());
        for g in 0..store.groups() {
            let p = store.view(g)?;
            per_group.push((model.quantize_weights(&p)?, p));
        }
        Ok(Self {
            model,
            per_group,
            group_of_step: Box::new(group_of_step),
        })
    }
}

impl NoisePredictor for QuantizedModel<'_> {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let g = (self.group_of_step)(t);
        let (w, p) = self.per_group.get(g).ok_or(Error::UnknownGroup {
            group: g,
            available: self.per_group.len(),
        })?;
        Ok(self
            .model
            .quantized_forward(w, p, x, t, ForwardOptions::default())?
            .output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Eight Gaussian modes evenly spaced on a ring.
    Ring,
    TwoMoons,
    /// Single isotropic Gaussian.
    Gaussian,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" | "ring_mixture" => Ok(DatasetKind::Ring),
            "two_moons" | "moons" => Ok(DatasetKind::TwoMoons),
            "gaussian" => Ok(DatasetKind::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}`"))),
        }
    }
}

pub const RING_RADIUS: f64 = 1.0;
pub const RING_MODE_STD: f64 = 0.1;
pub const GAUSSIAN_MEAN: [f64; 2] = [0.5, -0.25];
pub const GAUSSIAN_STD: f64 = 0.5;

/// `n` points in 2-D from the named toy distribution.
pub fn generate_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = match kind {
            DatasetKind::Ring => {
                let k = rng.range_inclusive(0, 7) as f64;
                let ang = k * std::f64::consts::TAU / 8.0;
                vec![
                    RING_RADIUS * ang.cos() + RING_MODE_STD * rng.normal(),
                    RING_RADIUS * ang.sin() + RING_MODE_STD * rng.normal(),
                ]
            }
            DatasetKind::TwoMoons => {
                let upper = rng.uniform() < 0.5;
                let a = std::f64::consts::PI * rng.uniform();
                let (x, y) = if upper {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                vec![
                    (x - 0.5) * 0.8 + 0.05 * rng.normal(),
                    (y - 0.25) * 0.8 + 0.05 * rng.normal(),
                ]
            }
            DatasetKind::Gaussian => vec![
                GAUSSIAN_MEAN[0] + GAUSSIAN_STD * rng.normal(),
                GAUSSIAN_MEAN[1] + GAUSSIAN_STD * rng.normal(),
            ],
        };
        out.push(Tensor::vector(p));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 16,
            epochs: 40,
            steps_per_epoch: 50,
            batch_size: 128,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDenoiser {
    pub model: MlpDenoiser,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainedDenoiser {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

/// Noise-prediction loss and its parameter gradient on one minibatch.
///
/// Loss is the mean over the batch of `||eps_theta(x_t, t) - eps||^2 / dim`.
pub fn mlp_loss_and_grad(
    m: &MlpDenoiser,
    batch: &[(Tensor, usize, Tensor)],
) -> Result<(f64, Vec<f64>)> {
    let (d, h) = (m.dim, m.hidden);
    let in_w = d + m.embed;
    let mut gw1 = vec![0.0; h * in_w];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; h * h];
    let mut gb2 = vec![0.0; h];
    let mut gw3 = vec![0.0; d * h];
    let mut gb3 = vec![0.0; d];
    let mut loss = 0.0;
    let scale = 1.0 / (batch.len() as f64 * d as f64);
    for (x, t, eps) in batch {
        let mut input = x.data().to_vec();
        input.extend(time_embedding(*t, m.embed));
        let input = Tensor::vector(input);
        let a1 = m.w1.matvec(&input)?.add(&m.b1)?.map(f64::tanh);
        let a2 = m.w2.matvec(&a1)?.add(&m.b2)?.map(f64::tanh);
        let out = m.w3.matvec(&a2)?.add(&m.b3)?;
        let r = out.sub(eps)?;
        loss += r.norm_sq() * scale;
        let g_out = r.scale(2.0 * scale);
        for i in 0..d {
            gb3[i] += g_out.data()[i];
            for j in 0..h {
                gw3[i * h + j] += g_out.data()[i] * a2.data()[j];
            }
        }
        let g_a2 = m.w3.matvec_t(&g_out)?;
        let g_z2 = g_a2.zip_with(&a2, |g, a| g * (1.0 - a * a))?;
        for i in 0..h {
            gb2[i] += g_z2.data()[i];
            for j in 0..h {
                gw2[i * h + j] += g_z2.data()[i] * a1.data()[j];
            }
        }
        let g_a1 = m.w2.matvec_t(&g_z2)?;
        let g_z1 = g_a1.zip_with(&a1, |g, a| g * (1.0 - a * a))?;
        for i in 0..h {
            gb1[i] += g_z1.data()[i];
            for j in 0..in_w {
                gw1[i * in_w + j] += g_z1.data()[i] * input.data()[j];
            }
        }
    }
    let grad = [gw1, gb1, gw2, gb2, gw3, gb3].concat();
    Ok((loss, grad))
}

/// Trains an MLP noise predictor on `dataset` with uniform step sampling.
pub fn train_toy_denoiser(
    dataset: &[Tensor],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainedDenoiser> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if config.epochs == 0 || config.steps_per_epoch == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "epochs, steps_per_epoch and batch_size must be >= 1".into(),
        ));
    }
    let dim = dataset[0].len();
    let mut rng = Rng::new(config.seed);
    let mut model = MlpDenoiser::random(dim, config.hidden, config.embed, &mut rng)?;
    let mut params = model.flat_params();
    let mut adam = AdamState::new(
        params.len(),
        AdamConfig::with_learning_rate(config.learning_rate),
    );
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let x0 = &dataset[rng.range_inclusive(0, dataset.len() - 1)];
                let t = rng.range_inclusive(1, schedule.steps());
                let eps = gaussian_sample(&mut rng, &[dim])?;
                batch.push((forward_diffuse(x0, t, &eps, schedule)?, t, eps));
            }
            let (loss, grad) = mlp_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    context: "denoiser training".into(),
                    epoch,
                });
            }
            adam_step(&mut params, &grad, &mut adam)?;
            model.set_flat_params(&params)?;
            total += loss;
        }
        epoch_losses.push(total / config.steps_per_epoch as f64);
    }
    Ok(TrainedDenoiser {
        model,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::quantizer::QuantizerParams;

    fn identity_linear(dim: usize, steps: usize) -> LinearDenoiser {
        LinearDenoiser::new(
            vec![Tensor::identity(dim); steps],
            vec![Tensor::zeros(&[dim]); steps],
        )
        .unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(linear_predict(&identity_linear(2, 3), &x, 2).unwrap(), x);

        let c = Tensor::vector(vec![0.4, -0.3]);
        let m = LinearDenoiser::new(vec![Tensor::zeros(&[2, 2])], vec![c.clone()]).unwrap();
        assert_eq!(linear_predict(&m, &Tensor::vector(vec![9.0, -2.0]), 1).unwrap(), c);

        let m = LinearDenoiser::new(
            vec![Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap()],
            vec![Tensor::vector(vec![1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(linear_predict(&m, &x, 1).unwrap().data(), &[4.0, 1.0]);
        assert!(linear_predict(&m, &Tensor::vector(vec![1.0]), 1).is_err());
        assert!(linear_predict(&m, &x, 2).is_err());
        assert!(linear_jacobian(&m, 0).is_err());
    }

    #[test]
    fn linear_jacobian_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let m = LinearDenoiser::random(3, 4, 1.0, &mut rng).unwrap();
        let x = Tensor::vector(vec![0.2, -0.7, 1.1]);
        for t in 1..=4 {
            let jac = linear_jacobian(&m, t).unwrap();
            for i in 0..3 {
                let fd = finite_diff_grad(
                    |y| linear_predict(&m, y, t).unwrap().data()[i],
                    &x,
                    1e-5,
                )
                .unwrap();
                for j in 0..3 {
                    assert!((fd.data()[j] - jac.at(i, j)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mlp_zero_weights_predict_zero() {
        let m = MlpDenoiser::zeros(2, 8, 4);
        let out = mlp_predict(&m, &Tensor::vector(vec![3.0, -1.0]), 17).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn mlp_output_shape() {
        let m = MlpDenoiser::random(2, 16, 8, &mut Rng::new(3)).unwrap();
        let out = mlp_predict(&m, &Tensor::vector(vec![0.1, 0.2]), 4).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert!(mlp_predict(&m, &Tensor::vector(vec![0.1]), 4).is_err());
    }

    #[test]
    fn single_unit_by_hand() {
        let mut m = MlpDenoiser::zeros(1, 1, 2);
        // input = [x, sin(t), cos(t)]
        m.w1 = Tensor::new(vec![1, 3], vec![0.5, 0.25, -0.125]).unwrap();
        m.b1 = Tensor::vector(vec![0.1]);
        m.w2 = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        m.b2 = Tensor::vector(vec![-0.3]);
        m.w3 = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        m.b3 = Tensor::vector(vec![0.05]);
        let (x, t) = (0.8f64, 3usize);
        let z1 = 0.5 * x + 0.25 * (t as f64).sin() - 0.125 * (t as f64).cos() + 0.1;
        let a2 = (2.0 * z1.tanh() - 0.3).tanh();
        let expected = 1.5 * a2 + 0.05;
        let got = mlp_predict(&m, &Tensor::vector(vec![x]), t).unwrap();
        assert!((got.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let m = MlpDenoiser::random(2, 8, 4, &mut rng).unwrap();
        let batch: Vec<_> = (0..3)
            .map(|i| {
                (
                    gaussian_sample(&mut rng, &[2]).unwrap(),
                    3 + 5 * i,
                    gaussian_sample(&mut rng, &[2]).unwrap(),
                )
            })
            .collect();
        let (_, grad) = mlp_loss_and_grad(&m, &batch).unwrap();
        let flat = Tensor::vector(m.flat_params());
        let fd = finite_diff_grad(
            |p| {
                let mut mm = m.clone();
                mm.set_flat_params(p.data()).unwrap();
                mlp_loss_and_grad(&mm, &batch).unwrap().0
            },
            &flat,
            1e-6,
        )
        .unwrap();
        for (i, (a, b)) in grad.iter().zip(fd.data()).enumerate() {
            let tol = 1e-4 * a.abs().max(b.abs()).max(1e-3);
            assert!((a - b).abs() <= tol, "param {i}: {a} vs {b}");
        }
    }

    #[test]
    fn training_reduces_loss() {
        let schedule = NoiseSchedule::linear_beta(50, 1e-4, 0.1).unwrap();
        let data = generate_dataset(DatasetKind::Ring, 512, 1).unwrap();
        let cfg = TrainConfig {
            hidden: 16,
            embed: 8,
            epochs: 6,
            steps_per_epoch: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 4,
        };
        let trained = train_toy_denoiser(&data, &schedule, &cfg).unwrap();
        assert_eq!(trained.epoch_losses.len(), 6);
        assert!(trained.final_loss() < trained.epoch_losses[0]);
    }

    #[test]
    fn training_rejects_bad_input() {
        let schedule = NoiseSchedule::linear_beta(10, 1e-4, 0.1).unwrap();
        assert!(train_toy_denoiser(&[], &schedule, &TrainConfig::default()).is_err());
        let data = generate_dataset(DatasetKind::Gaussian, 4, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train_toy_denoiser(&data, &schedule, &cfg).is_err());
    }

    #[test]
    fn training_divergence_is_reported() {
        let schedule = NoiseSchedule::linear_beta(10, 1e-4, 0.1).unwrap();
        let data = vec![Tensor::vector(vec![f64::NAN, 0.0])];
        let cfg = TrainConfig {
            hidden: 4,
            embed: 2,
            epochs: 2,
            steps_per_epoch: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert_eq!(
            train_toy_denoiser(&data, &schedule, &cfg),
            Err(Error::Diverged {
                context: "denoiser training".into(),
                epoch: 0
            })
        );
    }

    #[test]
    fn datasets_are_seeded() {
        for kind in [DatasetKind::Ring, DatasetKind::TwoMoons, DatasetKind::Gaussian] {
            let a = generate_dataset(kind, 100, 3).unwrap();
            assert_eq!(a, generate_dataset(kind, 100, 3).unwrap());
            assert_ne!(a, generate_dataset(kind, 100, 4).unwrap());
        }
        assert!(generate_dataset(DatasetKind::Ring, 0, 0).is_err());
        assert_eq!("two_moons".parse::<DatasetKind>().unwrap(), DatasetKind::TwoMoons);
    }

    fn mlp_store(model: &Denoiser, bits: u32, step: f64) -> GroupQuantizerStore {
        let mut store = GroupQuantizerStore::new(model.sites(), 1);
        for s in model.sites() {
            let q = QuantizerParams::new(step, 1i64 << (bits - 1), bits).unwrap();
            match s.kind {
                SiteKind::Weight => store.set_weight(&s.id, q).unwrap(),
                SiteKind::Activation => store.set_activation(0, &s.id, q).unwrap(),
            }
        }
        store
    }

    #[test]
    fn fine_quantization_is_transparent() {
        let model = Denoiser::Mlp(MlpDenoiser::random(2, 16, 8, &mut Rng::new(1)).unwrap());
        let store = mlp_store(&model, 32, 1e-9);
        let x = Tensor::vector(vec![0.3, -0.4]);
        let rec = quantized_predict(&model, &store, 0, &x, 7).unwrap();
        let fp = model.predict(&x, 7).unwrap();
        assert!(rec.output.max_abs_diff(&fp).unwrap() < 1e-6);
        assert_eq!(rec.grad_step.len(), 3);
        assert_eq!(rec.retained, MLP_RETAINED_PER_CALL);
    }

    #[test]
    fn unknown_site_is_rejected() {
        let model = Denoiser::Mlp(MlpDenoiser::random(2, 4, 2, &mut Rng::new(1)).unwrap());
        let store = GroupQuantizerStore::new(vec![SiteSpec::activation(SITE_INPUT)], 1);
        let x = Tensor::vector(vec![0.3, -0.4]);
        assert!(matches!(
            quantized_predict(&model, &store, 0, &x, 1),
            Err(Error::UnknownSite(_))
        ));
        let fp = SiteParams::full_precision();
        let w = model.quantize_weights(&fp).unwrap();
        let bogus = vec!["w1".to_string()];
        let opts = ForwardOptions {
            grad_sites: &bogus,
            ..Default::default()
        };
        assert!(model.quantized_forward(&w, &fp, &x, 1, opts).is_err());
    }

    #[test]
    fn step_gradients_match_frozen_finite_differences() {
        let model = Denoiser::Mlp(MlpDenoiser::random(2, 16, 8, &mut Rng::new(2)).unwrap());
        let store = mlp_store(&model, 4, 0.15);
        let x = Tensor::vector(vec![0.45, -0.35]);
        let rec = quantized_predict(&model, &store, 0, &x, 5).unwrap();
        let params = store.view(0).unwrap();
        let weights = model.quantize_weights(&params).unwrap();
        for site in model.activation_sites() {
            for i in 0..2 {
                let fd = finite_diff_grad(
                    |s| {
                        let p = params.with_step(&site, s.data()[0]).unwrap();
                        let opts = ForwardOptions {
                            frozen: Some(&rec.patterns),
                            ..Default::default()
                        };
                        model
                            .quantized_forward(&weights, &p, &x, 5, opts)
                            .unwrap()
                            .output
                            .data()[i]
                    },
                    &Tensor::vector(vec![0.15]),
                    1e-6,
                )
                .unwrap();
                let g = rec.grad_step[&site].data()[i];
                assert!(
                    (fd.data()[0] - g).abs() <= 1e-5 * g.abs().max(1e-3),
                    "{site}[{i}]: {g} vs {}",
                    fd.data()[0]
                );
            }
        }
    }

    #[test]
    fn full_precision_input_jacobian() {
        let model = Denoiser::Mlp(MlpDenoiser::random(2, 16, 8, &mut Rng::new(8)).unwrap());
        let x = Tensor::vector(vec![0.1, 0.9]);
        let jac = model.input_jacobian(&x, 12).unwrap();
        for i in 0..2 {
            let fd = finite_diff_grad(|y| model.predict(y, 12).unwrap().data()[i], &x, 1e-6).unwrap();
            for j in 0..2 {
                assert!((fd.data()[j] - jac.at(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn model_json_roundtrip() {
        let model = Denoiser::Mlp(MlpDenoiser::random(2, 4, 2, &mut Rng::new(1)).unwrap());
        let json = serde_json::to_string(&model).unwrap();
        assert!(json.contains("\"kind\":\"mlp\""));
        let back: Denoiser = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
        back.validate().unwrap();
    }
}
