//! Uniform affine fake quantization with a learned step size.
//!
//! `level = clip(round(v / s) + z, 0, 2^b - 1)`, `v_hat = s (level - z)`.
//! Rounding breaks ties away from zero. The step-size gradient follows the
//! straight-through rule: `round(v/s) - v/s` inside the range and the rail
//! offset `level - z` for clipped values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest admissible step size.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    #[serde(rename = "s")]
    pub step: f64,
    #[serde(rename = "z")]
    pub zero_point: i64,
    #[serde(rename = "b")]
    pub bits: u32,
}

impl QuantizerParams {
    pub fn new(step: f64, zero_point: i64, bits: u32) -> Result<Self> {
        let q = Self {
            step,
            zero_point,
            bits,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.bits) {
            return Err(Error::InvalidQuantizer(format!(
                "bit-width {} outside 2..=32",
                self.bits
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidQuantizer(format!(
                "step size must be positive, got {}",
                self.step
            )));
        }
        if self.zero_point < 0 || self.zero_point > self.max_level() {
            return Err(Error::InvalidQuantizer(format!(
                "zero point {} outside [0, {}]",
                self.zero_point,
                self.max_level()
            )));
        }
        Ok(())
    }

    pub fn max_level(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Smallest and largest representable values.
    pub fn range(&self) -> (f64, f64) {
        (
            self.step * (0 - self.zero_point) as f64,
            self.step * (self.max_level() - self.zero_point) as f64,
        )
    }

    pub fn with_step(self, step: f64) -> Self {
        Self { step, ..self }
    }
}

pub fn quantize(v: f64, q: &QuantizerParams) -> i64 {
    let r = (v / q.step).round();
    // Saturating float-to-int keeps huge ratios on the rails.
    let level = (r as i64).saturating_add(q.zero_point);
    level.clamp(0, q.max_level())
}

pub fn dequantize(level: i64, q: &QuantizerParams) -> Result<f64> {
    if level < 0 || level > q.max_level() {
        return Err(Error::LevelOutOfRange {
            level,
            max: q.max_level(),
        });
    }
    Ok(q.step * (level - q.zero_point) as f64)
}

/// How one element was rounded, replayable at a different step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rounding {
    /// `round(v/s) - v/s` at the reference step.
    InRange { offset: f64 },
    Clipped { level: i64 },
}

impl Rounding {
    fn grad_step(self, zero_point: i64) -> f64 {
        match self {
            Rounding::InRange { offset } => offset,
            Rounding::Clipped { level } => (level - zero_point) as f64,
        }
    }

    fn grad_input(self) -> f64 {
        match self {
            Rounding::InRange { .. } => 1.0,
            Rounding::Clipped { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuant {
    pub values: Tensor,
    /// d v_hat / d s per element.
    pub grad_step: Tensor,
    /// d v_hat / d v per element (1 inside the range, 0 on a rail).
    pub grad_input: Tensor,
    pub pattern: Vec<Rounding>,
}

pub fn fake_quant(v: &Tensor, q: &QuantizerParams) -> FakeQuant {
    let s = q.step;
    let z = q.zero_point;
    let qmax = q.max_level();
    let pattern: Vec<Rounding> = v
        .data()
        .iter()
        .map(|&x| {
            let u = x / s;
            let r = u.round();
            let level = (r as i64).saturating_add(z);
            if level < 0 {
                Rounding::Clipped { level: 0 }
            } else if level > qmax {
                Rounding::Clipped { level: qmax }
            } else {
                Rounding::InRange { offset: r - u }
            }
        })
        .collect();
    let mut out = FakeQuant {
        values: Tensor::zeros(v.shape()),
        grad_step: Tensor::zeros(v.shape()),
        grad_input: Tensor::zeros(v.shape()),
        pattern,
    };
    for (i, (&x, p)) in v.data().iter().zip(&out.pattern).enumerate() {
        out.values.data_mut()[i] = match *p {
            Rounding::InRange { .. } => s * ((x / s).round()),
            Rounding::Clipped { level } => s * (level - z) as f64,
        };
        out.grad_step.data_mut()[i] = p.grad_step(z);
        out.grad_input.data_mut()[i] = p.grad_input();
    }
    out
}

/// Replays a recorded rounding pattern at step size `q.step`.
///
/// In-range elements become `v + s * offset` and clipped ones `s * (level - z)`:
/// a smooth function of `s` whose derivative is exactly the straight-through
/// gradient recorded by [`fake_quant`] at the reference step.
pub fn fake_quant_frozen(v: &Tensor, q: &QuantizerParams, pattern: &[Rounding]) -> Result<Tensor> {
    if pattern.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![pattern.len()],
            actual: v.shape().to_vec(),
        });
    }
    let data = v
        .data()
        .iter()
        .zip(pattern)
        .map(|(&x, p)| match *p {
            Rounding::InRange { offset } => x + q.step * offset,
            Rounding::Clipped { level } => q.step * (level - q.zero_point) as f64,
        })
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxInit {
    pub params: QuantizerParams,
    /// Set when the samples had no spread and the step was floored.
    pub degenerate: bool,
}

/// Min-max initialization. The symmetric variant centres the zero point at `2^(b-1)`.
pub fn minmax_init(samples: &[f64], bits: u32, symmetric: bool) -> Result<MinMaxInit> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples for min-max init".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite calibration sample".into()));
    }
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidQuantizer(format!("bit-width {bits} outside 2..=32")));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let qmax = ((1i64 << bits) - 1) as f64;
    let (raw_step, zero) = if symmetric {
        let m = lo.abs().max(hi.abs());
        (2.0 * m / qmax, None)
    } else {
        ((hi - lo) / qmax, Some(lo))
    };
    let degenerate = !(raw_step >= MIN_STEP);
    let step = if degenerate { MIN_STEP } else { raw_step };
    let zero_point = match zero {
        None => 1i64 << (bits - 1),
        Some(lo) => ((-lo / step).round() as i64).clamp(0, qmax as i64),
    };
    Ok(MinMaxInit {
        params: QuantizerParams::new(step, zero_point, bits)?,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub id: String,
    pub kind: SiteKind,
}

impl SiteSpec {
    pub fn weight(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: SiteKind::Weight,
        }
    }

    pub fn activation(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: SiteKind::Activation,
        }
    }
}

/// Quantizer parameters resolved for one forward pass.
///
/// A full-precision view answers `None` for every site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteParams {
    map: BTreeMap<String, QuantizerParams>,
    full_precision: bool,
}

impl SiteParams {
    pub fn full_precision() -> Self {
        Self {
            map: BTreeMap::new(),
            full_precision: true,
        }
    }

    pub fn from_map(map: BTreeMap<String, QuantizerParams>) -> Self {
        Self {
            map,
            full_precision: false,
        }
    }

    pub fn get(&self, site: &str) -> Result<Option<QuantizerParams>> {
        if self.full_precision {
            return Ok(None);
        }
        self.map
            .get(site)
            .copied()
            .map(Some)
            .ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    pub fn is_full_precision(&self) -> bool {
        self.full_precision
    }

    /// Copy with `site`'s step replaced.
    pub fn with_step(&self, site: &str, step: f64) -> Result<Self> {
        let mut out = self.clone();
        let q = out
            .map
            .get_mut(site)
            .ok_or_else(|| Error::UnknownSite(site.to_string()))?;
        q.step = step;
        Ok(out)
    }
}

/// Per-group activation quantizers plus step-invariant weight quantizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoreDoc", into = "StoreDoc")]
pub struct GroupQuantizerStore {
    sites: Vec<SiteSpec>,
    weights: BTreeMap<String, QuantizerParams>,
    activations: Vec<BTreeMap<String, QuantizerParams>>,
}

#[derive(Serialize, Deserialize)]
struct StoreDoc {
    sites: Vec<SiteSpec>,
    groups: Vec<StoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoreEntry {
    l: usize,
    site_id: String,
    s: f64,
    z: i64,
    b: u32,
}

impl GroupQuantizerStore {
    /// Every site of `sites` must later receive parameters for every group.
    pub fn new(sites: Vec<SiteSpec>, groups: usize) -> Self {
        Self {
            sites,
            weights: BTreeMap::new(),
            activations: vec![BTreeMap::new(); groups],
        }
    }

    pub fn sites(&self) -> &[SiteSpec] {
        &self.sites
    }

    pub fn activation_sites(&self) -> Vec<String> {
        self.sites_of(SiteKind::Activation)
    }

    pub fn weight_sites(&self) -> Vec<String> {
        self.sites_of(SiteKind::Weight)
    }

    fn sites_of(&self, kind: SiteKind) -> Vec<String> {
        self.sites
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn groups(&self) -> usize {
        self.activations.len()
    }

    fn site_kind(&self, site: &str) -> Result<SiteKind> {
        self.sites
            .iter()
            .find(|s| s.id == site)
            .map(|s| s.kind)
            .ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    fn check_group(&self, group: usize) -> Result<()> {
        if group >= self.activations.len() {
            return Err(Error::UnknownGroup {
                group,
                available: self.activations.len(),
            });
        }
        Ok(())
    }

    pub fn set_weight(&mut self, site: &str, q: QuantizerParams) -> Result<()> {
        if self.site_kind(site)? != SiteKind::Weight {
            return Err(Error::InvalidArgument(format!("`{site}` is not a weight site")));
        }
        q.validate()?;
        self.weights.insert(site.to_string(), q);
        Ok(())
    }

    pub fn set_activation(&mut self, group: usize, site: &str, q: QuantizerParams) -> Result<()> {
        if self.site_kind(site)? != SiteKind::Activation {
            return Err(Error::InvalidArgument(format!("`{site}` is not an activation site")));
        }
        self.check_group(group)?;
        q.validate()?;
        self.activations[group].insert(site.to_string(), q);
        Ok(())
    }

    pub fn get(&self, group: usize, site: &str) -> Result<QuantizerParams> {
        self.check_group(group)?;
        let map = match self.site_kind(site)? {
            SiteKind::Weight => &self.weights,
            SiteKind::Activation => &self.activations[group],
        };
        map.get(site)
            .copied()
            .ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    /// All parameters a forward pass in `group` needs.
    pub fn view(&self, group: usize) -> Result<SiteParams> {
        self.check_group(group)?;
        let mut map = BTreeMap::new();
        for s in &self.sites {
            map.insert(s.id.clone(), self.get(group, &s.id)?);
        }
        Ok(SiteParams::from_map(map))
    }

    /// True when every group has parameters for every registered site.
    pub fn is_complete(&self) -> bool {
        (0..self.groups()).all(|g| self.sites.iter().all(|s| self.get(g, &s.id).is_ok()))
    }
}

impl TryFrom<StoreDoc> for GroupQuantizerStore {
    type Error = Error;

    fn try_from(doc: StoreDoc) -> Result<Self> {
        let groups = doc.groups.iter().map(|e| e.l + 1).max().unwrap_or(0);
        let mut store = GroupQuantizerStore::new(doc.sites, groups);
        for e in doc.groups {
            let q = QuantizerParams::new(e.s, e.z, e.b)?;
            match store.site_kind(&e.site_id)? {
                SiteKind::Weight => {
                    if let Some(prev) = store.weights.get(&e.site_id) {
                        if *prev != q {
                            return Err(Error::Serde(format!(
                                "weight site `{}` differs across groups",
                                e.site_id
                            )));
                        }
                    }
                    store.set_weight(&e.site_id, q)?;
                }
                SiteKind::Activation => store.set_activation(e.l, &e.site_id, q)?,
            }
        }
        if !store.is_complete() {
            return Err(Error::Serde("store is missing site parameters".into()));
        }
        Ok(store)
    }
}

impl From<GroupQuantizerStore> for StoreDoc {
    fn from(store: GroupQuantizerStore) -> Self {
        let mut entries = Vec::new();
        for l in 0..store.groups() {
            for site in &store.sites {
                if let Ok(q) = store.get(l, &site.id) {
                    entries.push(StoreEntry {
                        l,
                        site_id: site.id.clone(),
                        s: q.step,
                        z: q.zero_point,
                        b: q.bits,
                    });
                }
            }
        }
        StoreDoc {
            sites: store.sites,
            groups: entries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn q(s: f64, z: i64, b: u32) -> QuantizerParams {
        QuantizerParams::new(s, z, b).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.37, &q(0.1, 0, 4)), 4);
        assert_eq!(quantize(2.0, &q(0.1, 0, 4)), 15);
        assert_eq!(quantize(-0.05, &q(0.1, 8, 4)), 7);
        assert_eq!(quantize(-5.0, &q(0.1, 8, 4)), 0);
    }

    #[test]
    fn dequantize_examples() {
        let p = q(0.1, 3, 4);
        assert_eq!(dequantize(3, &p).unwrap(), 0.0);
        assert!((dequantize(4, &q(0.1, 0, 4)).unwrap() - 0.4).abs() < 1e-15);
        assert!(dequantize(16, &p).is_err());
        assert!(dequantize(-1, &p).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(QuantizerParams::new(0.0, 0, 4).is_err());
        assert!(QuantizerParams::new(0.1, 16, 4).is_err());
        assert!(QuantizerParams::new(0.1, 0, 1).is_err());
    }

    #[test]
    fn fake_quant_grid_point_and_rail() {
        let out = fake_quant(&Tensor::vector(vec![0.0]), &q(0.1, 0, 4));
        assert_eq!(out.values.data(), &[0.0]);
        assert_eq!(out.grad_step.data(), &[0.0]);

        let out = fake_quant(&Tensor::vector(vec![2.0]), &q(0.1, 0, 4));
        assert!((out.values.data()[0] - 1.5).abs() < 1e-15);
        assert_eq!(out.grad_step.data(), &[15.0]);
        assert_eq!(out.grad_input.data(), &[0.0]);
        // The rail is flat in v and linear in s, so plain finite differences agree.
        let fd = finite_diff_grad(
            |s| fake_quant(&Tensor::vector(vec![2.0]), &q(s.data()[0], 0, 4)).values.data()[0],
            &Tensor::vector(vec![0.1]),
            1e-7,
        )
        .unwrap();
        assert!((fd.data()[0] - 15.0).abs() < 1e-6);
    }

    #[test]
    fn straight_through_gradient_matches_frozen_rounding() {
        let params = q(0.07, 5, 4);
        let v = Tensor::vector(vec![0.37, -0.21, 0.05, 3.0, -3.0, 0.5]);
        let base = fake_quant(&v, &params);
        for i in 0..v.len() {
            let fd = finite_diff_grad(
                |s| {
                    fake_quant_frozen(&v, &params.with_step(s.data()[0]), &base.pattern)
                        .unwrap()
                        .data()[i]
                },
                &Tensor::vector(vec![params.step]),
                1e-6,
            )
            .unwrap();
            let g = base.grad_step.data()[i];
            assert!((fd.data()[0] - g).abs() <= 1e-6 * g.abs().max(1.0), "element {i}");
        }
        let replay = fake_quant_frozen(&v, &params, &base.pattern).unwrap();
        assert!(replay.max_abs_diff(&base.values).unwrap() < 1e-15);
    }

    #[test]
    fn minmax_examples() {
        let init = minmax_init(&[0.0, 0.7, 1.5], 4, false).unwrap();
        assert!((init.params.step - 0.1).abs() < 1e-15);
        assert_eq!(init.params.zero_point, 0);
        assert!(!init.degenerate);

        let init = minmax_init(&[-1.0, 0.2, 1.0], 8, true).unwrap();
        assert!((init.params.step - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(init.params.zero_point, 128);

        let init = minmax_init(&[0.3; 5], 8, false).unwrap();
        assert_eq!(init.params.step, MIN_STEP);
        assert!(init.degenerate);

        assert!(minmax_init(&[], 8, false).is_err());
        assert!(minmax_init(&[f64::NAN], 8, false).is_err());
    }

    fn sample_store() -> GroupQuantizerStore {
        let mut store = GroupQuantizerStore::new(
            vec![SiteSpec::weight("w"), SiteSpec::activation("a")],
            3,
        );
        store.set_weight("w", q(0.01, 8, 4)).unwrap();
        for l in 0..3 {
            store.set_activation(l, "a", q(0.1 + l as f64, 2, 8)).unwrap();
        }
        store
    }

    #[test]
    fn store_lookup_and_json() {
        let store = sample_store();
        assert!(store.is_complete());
        assert_eq!(store.get(2, "a").unwrap().step, 2.1);
        assert_eq!(store.get(1, "w").unwrap(), store.get(2, "w").unwrap());
        assert!(matches!(store.get(0, "nope"), Err(Error::UnknownSite(_))));
        assert!(matches!(store.get(3, "a"), Err(Error::UnknownGroup { .. })));

        let json = serde_json::to_value(&store).unwrap();
        assert_eq!(json["groups"].as_array().unwrap().len(), 6);
        let weight_rows = json["groups"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|e| e["site_id"] == "w")
            .count();
        assert_eq!(weight_rows, 3);
        let back: GroupQuantizerStore = serde_json::from_value(json).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn store_rejects_inconsistent_weights() {
        let mut json = serde_json::to_value(sample_store()).unwrap();
        let rows = json["groups"].as_array_mut().unwrap();
        let row = rows
            .iter_mut()
            .find(|e| e["site_id"] == "w" && e["l"] == 1)
            .unwrap();
        row["s"] = serde_json::json!(0.5);
        assert!(serde_json::from_value::<GroupQuantizerStore>(json).is_err());
    }

    #[test]
    fn site_kinds_are_enforced() {
        let mut store = sample_store();
        assert!(store.set_weight("a", q(0.1, 0, 4)).is_err());
        assert!(store.set_activation(0, "w", q(0.1, 0, 4)).is_err());
    }

    #[test]
    fn full_precision_view() {
        let v = SiteParams::full_precision();
        assert_eq!(v.get("anything").unwrap(), None);
        let strict = sample_store().view(0).unwrap();
        assert!(strict.get("missing").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn error_bound_in_range(bits in 2u32..=8, s in 1e-3f64..1.0, zf in 0.0f64..1.0, u in 0.0f64..1.0) {
                let qmax = (1i64 << bits) - 1;
                let z = (zf * qmax as f64).round() as i64;
                let p = q(s, z, bits);
                let (lo, hi) = p.range();
                let v = lo + u * (hi - lo);
                let out = fake_quant(&Tensor::vector(vec![v]), &p);
                prop_assert!((out.values.data()[0] - v).abs() <= s / 2.0 + 1e-12);
                let level = quantize(v, &p);
                prop_assert!((dequantize(level, &p).unwrap() - v).abs() <= s / 2.0 + 1e-12);
            }

            #[test]
            fn idempotent(bits in 2u32..=8, s in 1e-3f64..1.0, v in -10.0f64..10.0) {
                let p = q(s, 1i64 << (bits - 1), bits);
                let once = fake_quant(&Tensor::vector(vec![v]), &p).values;
                let twice = fake_quant(&once, &p).values;
                prop_assert_eq!(once.data()[0].to_bits(), twice.data()[0].to_bits());
            }

            #[test]
            fn monotone(s in 1e-3f64..1.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
                let p = q(s, 7, 4);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(quantize(lo, &p) <= quantize(hi, &p));
            }
        }
    }
}
