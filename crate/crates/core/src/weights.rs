//! Weight-vector distributions and the function τ̃(q) = -log_b E[Σ_k W_k^q].
//!
//! Three families admit closed forms (a fixed vector, i.i.d. lognormal
//! components, i.i.d. two-point components). Anything else plugs in through
//! [`WeightSampler`] and is handled by Monte Carlo on a cached sample set,
//! with finite differences for the derivative.
//!
//! All τ quantities are in base `b`; natural logarithms are used internally.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Purpose};
use crate::word::Word;

/// Criticality band on τ̃'(1).
pub const CRITICAL_TOLERANCE: f64 = 1e-9;
/// Bisection tolerance for the endpoints of J.
pub const J_TOLERANCE: f64 = 1e-9;
/// Endpoints of J beyond this magnitude are reported as infinite.
pub const J_SEARCH_LIMIT: f64 = 64.0;

/// User-supplied sampler for weight vectors without a closed-form τ̃.
///
/// Implementations must return strictly positive components whose
/// expected sum is 1.
pub trait WeightSampler: Send + Sync + fmt::Debug {
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]);
    fn label(&self) -> String;
}

#[derive(Debug, Clone)]
pub enum WeightKind {
    /// A fixed vector (the "binomial" measure when b = 2).
    Deterministic { weights: Vec<f64> },
    /// Components i.i.d. `exp(N(m, σ²))` with `m = -ln b - σ²/2`, so `E W_k = 1/b`.
    LognormalIid { sigma2: f64 },
    /// Components i.i.d., equal to `low` with probability `p_low`, else `high`.
    TwoPointIid { low: f64, high: f64, p_low: f64 },
    Custom(Arc<dyn WeightSampler>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSettings {
    pub samples: usize,
    pub batches: usize,
    pub seed: u64,
}

impl Default for MonteCarloSettings {
    fn default() -> Self {
        MonteCarloSettings { samples: 1_000_000, batches: 100, seed: 0x5eed_cafe }
    }
}

/// Value of τ̃ at one q.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauValue {
    Exact(f64),
    Estimate { value: f64, std_err: f64 },
    /// The moment E[Σ W^q] diverged (or was not finite at the sample size).
    MinusInfinity,
}

impl TauValue {
    /// Numeric value, `f64::NEG_INFINITY` for the divergent sentinel.
    pub fn value(&self) -> f64 {
        match *self {
            TauValue::Exact(v) => v,
            TauValue::Estimate { value, .. } => value,
            TauValue::MinusInfinity => f64::NEG_INFINITY,
        }
    }

    pub fn std_err(&self) -> f64 {
        match *self {
            TauValue::Estimate { std_err, .. } => std_err,
            _ => 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, TauValue::MinusInfinity)
    }
}

/// Derivative τ̃'(q).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slope {
    pub value: f64,
    /// Truncation error estimate of the difference quotient (0 for closed forms).
    pub truncation_error: f64,
    /// Monte Carlo standard error (0 for closed forms).
    pub std_err: f64,
    /// Set when the symmetric stencil left the finite domain.
    pub one_sided: bool,
}

/// Open interval, endpoints possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, q: f64) -> bool {
        q > self.lo && q < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Nondegenerate,
    Critical,
    Degenerate,
    Indeterminate,
}

/// Plain-text description of an analytic model, `key = value` per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Deterministic {
        b: u32,
        weights: Vec<f64>,
    },
    Lognormal {
        b: u32,
        sigma2: f64,
    },
    TwoPoint {
        b: u32,
        low: f64,
        high: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_low: Option<f64>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<WeightModel> {
        match self {
            ModelSpec::Deterministic { b, weights } => WeightModel::deterministic(*b, weights.clone()),
            ModelSpec::Lognormal { b, sigma2 } => WeightModel::lognormal(*b, *sigma2),
            ModelSpec::TwoPoint { b, low, high, p_low } => match p_low {
                Some(p) => WeightModel::two_point_with_p(*b, *low, *high, *p),
                None => WeightModel::two_point(*b, *low, *high),
            },
        }
    }

    pub fn base(&self) -> u32 {
        match self {
            ModelSpec::Deterministic { b, .. }
            | ModelSpec::Lognormal { b, .. }
            | ModelSpec::TwoPoint { b, .. } => *b,
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Named collection of model specifications, stored as one table per model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(flatten)]
    pub models: std::collections::BTreeMap<String, ModelSpec>,
}

impl ModelRegistry {
    /// Models used throughout the tests and default experiments.
    pub fn standard() -> Self {
        let mut models = std::collections::BTreeMap::new();
        models.insert("lebesgue".into(), ModelSpec::Deterministic { b: 2, weights: vec![0.5, 0.5] });
        models.insert("binomial".into(), ModelSpec::Deterministic { b: 2, weights: vec![0.25, 0.75] });
        models.insert("lognormal".into(), ModelSpec::Lognormal { b: 2, sigma2: 0.05 });
        models.insert(
            "critical-lognormal".into(),
            ModelSpec::Lognormal { b: 2, sigma2: 2.0 * std::f64::consts::LN_2 },
        );
        models.insert("two-point".into(), ModelSpec::TwoPoint { b: 2, low: 0.3, high: 0.7, p_low: None });
        ModelRegistry { models }
    }

    pub fn get(&self, name: &str) -> Option<&ModelSpec> {
        self.models.get(name)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("registry serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Discrete representation used by the closed forms: `E Σ_k W_k^q = Σ_i mult_i · value_i^q`.
#[derive(Debug, Clone)]
struct Atoms {
    ln_mult: Vec<f64>,
    ln_value: Vec<f64>,
}

impl Atoms {
    /// `(ln Z(q), π(q))` with `Z = Σ mult_i value_i^q` and `π_i` the tilted atom weights.
    fn tilt(&self, q: f64) -> (f64, Vec<f64>) {
        let a: Vec<f64> = self.ln_mult.iter().zip(&self.ln_value).map(|(c, x)| c + q * x).collect();
        let ln_z = log_sum_exp(&a);
        let pi = a.iter().map(|ai| (ai - ln_z).exp()).collect();
        (ln_z, pi)
    }

    /// Limit of `q τ̃'(q) - τ̃(q)` as `q → ±∞`, in base-b units times ln b.
    fn g_limit_ln(&self, positive: bool) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for &x in &self.ln_value {
            best = if positive { best.max(x) } else { best.max(-x) };
        }
        let mult: f64 = self
            .ln_value
            .iter()
            .zip(&self.ln_mult)
            .filter(|(x, _)| if positive { **x == best } else { -**x == best })
            .map(|(_, c)| c.exp())
            .sum();
        mult.ln()
    }
}

/// Natural-log samples of weight vectors, cached for Monte Carlo estimates.
#[derive(Debug, Clone)]
struct McSamples {
    ln_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WeightModel {
    base: u32,
    kind: WeightKind,
    monte_carlo: MonteCarloSettings,
    mc_cache: OnceLock<McSamples>,
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl WeightModel {
    pub fn deterministic(base: u32, weights: Vec<f64>) -> Result<Self> {
        check_base(base)?;
        if weights.len() != base as usize {
            return Err(Error::InvalidModel(format!(
                "expected {base} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidModel("weights must be finite and strictly positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self::from_kind(base, WeightKind::Deterministic { weights }))
    }

    /// Uniform weights `1/b`: the cascade is Lebesgue measure.
    pub fn lebesgue(base: u32) -> Result<Self> {
        Self::deterministic(base, vec![1.0 / base as f64; base as usize])
    }

    pub fn lognormal(base: u32, sigma2: f64) -> Result<Self> {
        check_base(base)?;
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::InvalidModel(format!("sigma2 = {sigma2} must be finite and >= 0")));
        }
        Ok(Self::from_kind(base, WeightKind::LognormalIid { sigma2 }))
    }

    /// Two-point components with `p_low` chosen so that `E W_k = 1/b`.
    pub fn two_point(base: u32, low: f64, high: f64) -> Result<Self> {
        check_base(base)?;
        let target = 1.0 / base as f64;
        if !(low > 0.0 && low < target && target < high) {
            return Err(Error::InvalidModel(format!(
                "two-point model needs 0 < low < 1/b < high, got low={low}, high={high}"
            )));
        }
        let p_low = (high - target) / (high - low);
        Self::two_point_with_p(base, low, high, p_low)
    }

    pub fn two_point_with_p(base: u32, low: f64, high: f64, p_low: f64) -> Result<Self> {
        check_base(base)?;
        if !(low > 0.0 && high > 0.0 && low.is_finite() && high.is_finite()) {
            return Err(Error::InvalidModel("two-point atoms must be finite and positive".into()));
        }
        if !(0.0..=1.0).contains(&p_low) {
            return Err(Error::InvalidModel(format!("p_low = {p_low} outside [0, 1]")));
        }
        let mean = p_low * low + (1.0 - p_low) * high;
        if (mean * base as f64 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!(
                "E W_k = {mean}, expected 1/b = {}",
                1.0 / base as f64
            )));
        }
        Ok(Self::from_kind(base, WeightKind::TwoPointIid { low, high, p_low }))
    }

    /// Model backed by an arbitrary sampler. Normalization is checked by
    /// Monte Carlo: the mean of `Σ_k W_k` over 10⁵ draws must lie within
    /// 4 standard errors of 1.
    pub fn custom(base: u32, sampler: Arc<dyn WeightSampler>, monte_carlo: MonteCarloSettings) -> Result<Self> {
        check_base(base)?;
        let mut model = Self::from_kind(base, WeightKind::Custom(sampler));
        model.monte_carlo = monte_carlo;
        let (mean, se) = model.normalization_check(100_000, monte_carlo.seed ^ 0xa5a5)?;
        if (mean - 1.0).abs() > 4.0 * se.max(1e-15) {
            return Err(Error::InvalidModel(format!(
                "Monte Carlo E[Σ W_k] = {mean} ± {se} is not compatible with 1"
            )));
        }
        Ok(model)
    }

    fn from_kind(base: u32, kind: WeightKind) -> Self {
        WeightModel { base, kind, monte_carlo: MonteCarloSettings::default(), mc_cache: OnceLock::new() }
    }

    pub fn with_monte_carlo(mut self, settings: MonteCarloSettings) -> Self {
        self.monte_carlo = settings;
        self.mc_cache = OnceLock::new();
        self
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn is_analytic(&self) -> bool {
        !matches!(self.kind, WeightKind::Custom(_))
    }

    /// Weights bounded away from 0 and ∞ almost surely.
    pub fn is_bounded(&self) -> bool {
        matches!(self.kind, WeightKind::Deterministic { .. } | WeightKind::TwoPointIid { .. })
    }

    pub fn spec(&self) -> Option<ModelSpec> {
        match &self.kind {
            WeightKind::Deterministic { weights } => {
                Some(ModelSpec::Deterministic { b: self.base, weights: weights.clone() })
            }
            WeightKind::LognormalIid { sigma2 } => Some(ModelSpec::Lognormal { b: self.base, sigma2: *sigma2 }),
            WeightKind::TwoPointIid { low, high, p_low } => Some(ModelSpec::TwoPoint {
                b: self.base,
                low: *low,
                high: *high,
                p_low: Some(*p_low),
            }),
            WeightKind::Custom(_) => None,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            WeightKind::Deterministic { weights } => format!("deterministic(b={}, {:?})", self.base, weights),
            WeightKind::LognormalIid { sigma2 } => format!("lognormal(b={}, sigma2={sigma2})", self.base),
            WeightKind::TwoPointIid { low, high, p_low } => {
                format!("two-point(b={}, low={low}, high={high}, p_low={p_low})", self.base)
            }
            WeightKind::Custom(s) => format!("custom(b={}, {})", self.base, s.label()),
        }
    }

    fn ln_base(&self) -> f64 {
        (self.base as f64).ln()
    }

    fn atoms(&self) -> Option<Atoms> {
        let b = self.base as f64;
        match &self.kind {
            WeightKind::Deterministic { weights } => Some(Atoms {
                ln_mult: vec![0.0; weights.len()],
                ln_value: weights.iter().map(|w| w.ln()).collect(),
            }),
            WeightKind::TwoPointIid { low, high, p_low } => {
                let mut ln_mult = Vec::new();
                let mut ln_value = Vec::new();
                if *p_low > 0.0 {
                    ln_mult.push((b * p_low).ln());
                    ln_value.push(low.ln());
                }
                if *p_low < 1.0 {
                    ln_mult.push((b * (1.0 - p_low)).ln());
                    ln_value.push(high.ln());
                }
                Some(Atoms { ln_mult, ln_value })
            }
            _ => None,
        }
    }

    /// Natural logarithms of one weight vector drawn from `rng`.
    pub fn draw_ln(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.base as usize);
        match &self.kind {
            WeightKind::Deterministic { weights } => {
                for (o, w) in out.iter_mut().zip(weights) {
                    *o = w.ln();
                }
            }
            WeightKind::LognormalIid { sigma2 } => {
                let mean = -self.ln_base() - sigma2 / 2.0;
                let normal = Normal::new(mean, sigma2.sqrt()).expect("valid normal");
                for o in out.iter_mut() {
                    *o = normal.sample(rng);
                }
            }
            WeightKind::TwoPointIid { low, high, p_low } => {
                let (ln_low, ln_high) = (low.ln(), high.ln());
                for o in out.iter_mut() {
                    *o = if rng.random::<f64>() < *p_low { ln_low } else { ln_high };
                }
            }
            WeightKind::Custom(sampler) => {
                sampler.sample(rng, out);
                for o in out.iter_mut() {
                    *o = o.ln();
                }
            }
        }
    }

    /// One weight vector drawn from `rng`, in linear scale.
    pub fn draw(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        match &self.kind {
            WeightKind::Deterministic { weights } => out.copy_from_slice(weights),
            WeightKind::TwoPointIid { low, high, p_low } => {
                for o in out.iter_mut() {
                    *o = if rng.random::<f64>() < *p_low { *low } else { *high };
                }
            }
            WeightKind::Custom(sampler) => sampler.sample(rng, out),
            WeightKind::LognormalIid { .. } => {
                self.draw_ln(rng, out);
                for o in out.iter_mut() {
                    *o = o.exp();
                }
            }
        }
    }

    fn mc_samples(&self) -> &McSamples {
        self.mc_cache.get_or_init(|| {
            let b = self.base as usize;
            let mut ln_weights = vec![0.0; self.monte_carlo.samples * b];
            let mut rng = keyed_rng(self.monte_carlo.seed, Purpose::MonteCarlo, 0, 0);
            for chunk in ln_weights.chunks_mut(b) {
                self.draw_ln(&mut rng, chunk);
            }
            McSamples { ln_weights }
        })
    }

    /// Per-batch means of `Σ_k f(ln W_k)` over the cached draws.
    fn mc_batch_means(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let b = self.base as usize;
        let samples = &self.mc_samples().ln_weights;
        let draws = samples.len() / b;
        let batches = self.monte_carlo.batches.clamp(2, draws.max(2));
        let per_batch = draws / batches;
        (0..batches)
            .map(|k| {
                let chunk = &samples[k * per_batch * b..(k + 1) * per_batch * b];
                chunk.iter().map(|&x| f(x)).sum::<f64>() / per_batch as f64
            })
            .collect()
    }

    /// Batched Monte Carlo estimate of `E[Σ_k f(ln W_k)]`, returning `(mean, std_err)`.
    fn mc_expectation(&self, f: impl Fn(f64) -> f64) -> (f64, f64) {
        mean_and_se(&self.mc_batch_means(f))
    }

    /// Standard error of the difference quotient `(τ̃(a) - τ̃(c)) / (a - c)`,
    /// taken across batches so that common random numbers cancel.
    fn mc_quotient_se(&self, a: f64, c: f64) -> f64 {
        let top = self.mc_batch_means(|x| (a * x).exp());
        let bottom = self.mc_batch_means(|x| (c * x).exp());
        let lnb = self.ln_base();
        let quotients: Vec<f64> = top
            .iter()
            .zip(&bottom)
            .map(|(t, u)| -(t.ln() - u.ln()) / (lnb * (a - c)))
            .collect();
        mean_and_se(&quotients).1
    }

    fn normalization_check(&self, draws: usize, seed: u64) -> Result<(f64, f64)> {
        let b = self.base as usize;
        let mut rng = keyed_rng(seed, Purpose::MonteCarlo, 1, 0);
        let mut buf = vec![0.0; b];
        let mut sums = Vec::with_capacity(draws);
        for _ in 0..draws {
            self.draw(&mut rng, &mut buf);
            if buf.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::InvalidModel("sampler produced a non-positive weight".into()));
            }
            sums.push(buf.iter().sum::<f64>());
        }
        Ok(mean_and_se(&sums))
    }

    /// Monte Carlo estimate of τ̃(q), available for every model.
    pub fn tau_tilde_monte_carlo(&self, q: f64) -> TauValue {
        let (mean, se) = self.mc_expectation(|x| (q * x).exp());
        if !(mean.is_finite() && mean > 0.0 && se.is_finite()) {
            return TauValue::MinusInfinity;
        }
        let lnb = self.ln_base();
        TauValue::Estimate { value: -mean.ln() / lnb, std_err: se / (mean * lnb) }
    }

    /// τ̃(q) = -log_b E[Σ_k W_k^q].
    pub fn tau_tilde(&self, q: f64) -> TauValue {
        let lnb = self.ln_base();
        if let Some(atoms) = self.atoms() {
            let (ln_z, _) = atoms.tilt(q);
            return TauValue::Exact(-ln_z / lnb);
        }
        match &self.kind {
            WeightKind::LognormalIid { sigma2 } => {
                let m = -lnb - sigma2 / 2.0;
                TauValue::Exact(-1.0 - (q * m + q * q * sigma2 / 2.0) / lnb)
            }
            _ => self.tau_tilde_monte_carlo(q),
        }
    }

    /// τ̃'(q).
    pub fn tau_tilde_prime(&self, q: f64) -> Slope {
        let lnb = self.ln_base();
        if let Some(atoms) = self.atoms() {
            let (_, pi) = atoms.tilt(q);
            let mean_ln: f64 = pi.iter().zip(&atoms.ln_value).map(|(p, x)| p * x).sum();
            return Slope { value: -mean_ln / lnb, truncation_error: 0.0, std_err: 0.0, one_sided: false };
        }
        match &self.kind {
            WeightKind::LognormalIid { sigma2 } => {
                let m = -lnb - sigma2 / 2.0;
                Slope { value: -(m + q * sigma2) / lnb, truncation_error: 0.0, std_err: 0.0, one_sided: false }
            }
            _ => self.tau_tilde_prime_fd(q),
        }
    }

    /// Symmetric difference quotient on the Monte Carlo estimate with
    /// `h = 1e-5 max(1, |q|)` and common random numbers, falling back to a
    /// one-sided quotient where τ̃ is infinite on one side.
    pub fn tau_tilde_prime_fd(&self, q: f64) -> Slope {
        let h = 1e-5 * q.abs().max(1.0);
        let tau = |x: f64| self.tau_tilde_monte_carlo(x);
        let (plus, minus, centre) = (tau(q + h), tau(q - h), tau(q));
        match (plus.is_finite(), minus.is_finite(), centre.is_finite()) {
            (true, true, _) => {
                let std_err = self.mc_quotient_se(q + h, q - h);
                let d1 = (plus.value() - minus.value()) / (2.0 * h);
                let (p2, m2) = (tau(q + 2.0 * h), tau(q - 2.0 * h));
                let truncation_error = if p2.is_finite() && m2.is_finite() {
                    let d2 = (p2.value() - m2.value()) / (4.0 * h);
                    (d2 - d1).abs() / 3.0
                } else {
                    f64::NAN
                };
                Slope { value: d1, truncation_error, std_err, one_sided: false }
            }
            (true, false, true) => Slope {
                value: (plus.value() - centre.value()) / h,
                truncation_error: h,
                std_err: self.mc_quotient_se(q + h, q),
                one_sided: true,
            },
            (false, true, true) => Slope {
                value: (centre.value() - minus.value()) / h,
                truncation_error: h,
                std_err: self.mc_quotient_se(q, q - h),
                one_sided: true,
            },
            _ => Slope { value: f64::NAN, truncation_error: f64::NAN, std_err: f64::NAN, one_sided: true },
        }
    }

    /// `g(q) = q τ̃'(q) - τ̃(q)`, the Legendre value at the tangency point.
    pub fn legendre_at_tangency(&self, q: f64) -> f64 {
        let lnb = self.ln_base();
        if let Some(atoms) = self.atoms() {
            // (Σ π ln c + H(π)) / ln b, stable for large |q|.
            let (_, pi) = atoms.tilt(q);
            let mut acc = 0.0;
            for (p, c) in pi.iter().zip(&atoms.ln_mult) {
                if *p > 0.0 {
                    acc += p * c - p * p.ln();
                }
            }
            return acc / lnb;
        }
        match &self.kind {
            WeightKind::LognormalIid { sigma2 } => 1.0 - q * q * sigma2 / (2.0 * lnb),
            _ => q * self.tau_tilde_prime(q).value - self.tau_tilde(q).value(),
        }
    }

    /// J: interior of `{q : q τ̃'(q) - τ̃(q) > 0}`.
    ///
    /// For concave τ̃ the function g is non-decreasing on (-∞, 0] and
    /// non-increasing on [0, ∞) with g(0) = 1, so each endpoint is bracketed
    /// by doubling and refined by bisection.
    pub fn j_interval(&self) -> Result<Interval> {
        for k in 1..100 {
            let q = k as f64 / 100.0;
            let g = self.legendre_at_tangency(q);
            if !(g > 0.0) {
                return Err(Error::ModelInconsistency(format!(
                    "q τ̃'(q) - τ̃(q) = {g} <= 0 at q = {q}, but (0, 1) must lie inside J"
                )));
            }
        }
        let atoms = self.atoms();
        let hi = self.j_endpoint(1.0, atoms.as_ref().map(|a| a.g_limit_ln(true)));
        let lo = self.j_endpoint(-1.0, atoms.as_ref().map(|a| a.g_limit_ln(false)));
        Ok(Interval { lo, hi })
    }

    fn j_endpoint(&self, direction: f64, tail_limit: Option<f64>) -> f64 {
        if let Some(limit) = tail_limit {
            // g is monotone towards a limit >= 0: positive everywhere.
            if limit >= 0.0 {
                return direction * f64::INFINITY;
            }
        }
        let g = |q: f64| self.legendre_at_tangency(q);
        let mut inside = 0.5 * direction;
        let mut step = 1.0;
        loop {
            let probe = direction * step;
            if !(g(probe) > 0.0) {
                let mut outside = probe;
                while (outside - inside).abs() > J_TOLERANCE {
                    let mid = 0.5 * (inside + outside);
                    if g(mid) > 0.0 {
                        inside = mid;
                    } else {
                        outside = mid;
                    }
                }
                return 0.5 * (inside + outside);
            }
            inside = probe;
            if step >= J_SEARCH_LIMIT {
                return direction * f64::INFINITY;
            }
            step *= 2.0;
        }
    }

    /// Sign of τ̃'(1⁻) with a ±1e-9 criticality band.
    pub fn classify(&self) -> Classification {
        let slope = self.tau_tilde_prime(1.0);
        let uncertainty = slope.std_err.max(if slope.truncation_error.is_finite() { slope.truncation_error } else { 0.0 });
        if !slope.value.is_finite() {
            return Classification::Indeterminate;
        }
        if uncertainty > CRITICAL_TOLERANCE && slope.value.abs() <= CRITICAL_TOLERANCE + 4.0 * uncertainty {
            return Classification::Indeterminate;
        }
        if slope.value.abs() <= CRITICAL_TOLERANCE {
            Classification::Critical
        } else if slope.value > 0.0 {
            Classification::Nondegenerate
        } else {
            Classification::Degenerate
        }
    }

    /// Deterministic draw of the weight vector attached to `word` in the realization `seed`.
    pub fn sample_weights(&self, seed: u64, word: &Word) -> Vec<f64> {
        let mut rng = keyed_rng(seed, Purpose::NodeWeights, word.len(), word.index());
        let mut out = vec![0.0; self.base as usize];
        self.draw(&mut rng, &mut out);
        out
    }

    /// Natural logs of the weight vector at `word`; the same draw as [`Self::sample_weights`].
    pub fn sample_ln_weights(&self, seed: u64, word: &Word, out: &mut [f64]) {
        let mut rng = keyed_rng(seed, Purpose::NodeWeights, word.len(), word.index());
        self.draw_ln(&mut rng, out);
    }

    /// The model of `W_q = b^{τ̃(q)} W^q`.
    pub fn tilted(&self, q: f64) -> Result<WeightModel> {
        let tau = self.tau_tilde(q);
        if !tau.is_finite() {
            return Err(Error::Domain(format!("τ̃({q}) diverges")));
        }
        let tau = tau.value();
        match &self.kind {
            WeightKind::Deterministic { weights } => {
                let tilted = q_transform(weights, q, tau, self.base);
                let sum: f64 = tilted.iter().sum();
                // Renormalize rounding only.
                WeightModel::deterministic(self.base, tilted.iter().map(|w| w / sum).collect())
            }
            WeightKind::LognormalIid { sigma2 } => WeightModel::lognormal(self.base, q * q * sigma2),
            WeightKind::TwoPointIid { low, high, p_low } => {
                let t = q_transform(&[*low, *high], q, tau, self.base);
                let (low, high) = (t[0], t[1]);
                let mean = p_low * low + (1.0 - p_low) * high;
                let fix = 1.0 / (self.base as f64 * mean);
                WeightModel::two_point_with_p(self.base, low * fix, high * fix, *p_low)
            }
            WeightKind::Custom(inner) => {
                let sampler = Arc::new(TiltedSampler { inner: inner.clone(), q, tau, base: self.base });
                WeightModel::custom(self.base, sampler, self.monte_carlo)
            }
        }
    }
}

fn check_base(base: u32) -> Result<()> {
    if base < 2 {
        return Err(Error::InvalidModel(format!("base b = {base} must be >= 2")));
    }
    Ok(())
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `(b^{τ̃(q)} W_0^q, …, b^{τ̃(q)} W_{b-1}^q)`.
pub fn q_transform(weights: &[f64], q: f64, tau_q: f64, base: u32) -> Vec<f64> {
    let scale = tau_q * (base as f64).ln();
    weights.iter().map(|w| (scale + q * w.ln()).exp()).collect()
}

#[derive(Debug)]
struct TiltedSampler {
    inner: Arc<dyn WeightSampler>,
    q: f64,
    tau: f64,
    base: u32,
}

impl WeightSampler for TiltedSampler {
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        self.inner.sample(rng, out);
        let t = q_transform(out, self.q, self.tau, self.base);
        out.copy_from_slice(&t);
    }

    fn label(&self) -> String {
        format!("tilt(q={}) of {}", self.q, self.inner.label())
    }
}

/// τ̃ and τ̃' tabulated on a sorted q-grid, together with J.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauFunction {
    pub model: String,
    pub qs: Vec<f64>,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub j: Interval,
}

impl TauFunction {
    pub fn tabulate(model: &WeightModel, qs: &[f64]) -> Result<Self> {
        if qs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("q-grid must be strictly increasing".into()));
        }
        let j = model.j_interval()?;
        Ok(TauFunction {
            model: model.label(),
            qs: qs.to_vec(),
            values: qs.iter().map(|&q| model.tau_tilde(q).value()).collect(),
            derivatives: qs.iter().map(|&q| model.tau_tilde_prime(q).value).collect(),
            j,
        })
    }
}

/// `lo, lo + step, …` up to `hi` inclusive (within half a step).
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 0.5).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn binomial() -> WeightModel {
        WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap()
    }

    fn critical() -> WeightModel {
        WeightModel::lognormal(2, 2.0 * LN_2).unwrap()
    }

    #[derive(Debug)]
    struct UniformSampler;

    impl WeightSampler for UniformSampler {
        fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
            for o in out.iter_mut() {
                // U(0.2, 0.8): mean 1/2, bounded away from 0.
                *o = 0.2 + 0.6 * rng.random::<f64>();
            }
        }
        fn label(&self) -> String {
            "uniform(0.2, 0.8)".into()
        }
    }

    fn custom_uniform(samples: usize) -> WeightModel {
        WeightModel::custom(
            2,
            Arc::new(UniformSampler),
            MonteCarloSettings { samples, batches: 50, seed: 3 },
        )
        .unwrap()
    }

    #[test]
    fn tau_examples() {
        let lebesgue = WeightModel::lebesgue(2).unwrap();
        assert!((lebesgue.tau_tilde(3.0).value() - 2.0).abs() < 1e-12);
        let expected = -(0.0625f64 + 0.5625).log2();
        assert!((binomial().tau_tilde(2.0).value() - expected).abs() < 1e-12);
        assert!((expected - 0.678_071_9).abs() < 1e-7);
        for model in [binomial(), critical(), WeightModel::two_point(3, 0.1, 0.5).unwrap()] {
            assert!((model.tau_tilde(0.0).value() + 1.0).abs() < 1e-12);
            assert!(model.tau_tilde(1.0).value().abs() < 1e-12);
        }
    }

    #[test]
    fn tau_prime_examples() {
        let lebesgue = WeightModel::lebesgue(2).unwrap();
        for q in [-3.0, 0.0, 2.5] {
            assert!((lebesgue.tau_tilde_prime(q).value - 1.0).abs() < 1e-12);
        }
        let expected = -(0.25f64.ln() + 0.75f64.ln()) / (2.0 * LN_2);
        assert!((binomial().tau_tilde_prime(0.0).value - expected).abs() < 1e-12);
        assert!((expected - 1.207_518_7).abs() < 1e-7);
        assert!(critical().tau_tilde_prime(1.0).value.abs() < 1e-12);
    }

    #[test]
    fn critical_closed_form() {
        let model = critical();
        for q in [-2.0, -0.5, 0.3, 1.7] {
            let exact = -(q - 1.0f64).powi(2);
            assert!((model.tau_tilde(q).value() - exact).abs() < 1e-12);
            assert!((model.legendre_at_tangency(q) - (1.0 - q * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn j_interval_examples() {
        let j = WeightModel::lebesgue(2).unwrap().j_interval().unwrap();
        assert_eq!((j.lo, j.hi), (f64::NEG_INFINITY, f64::INFINITY));
        let j = critical().j_interval().unwrap();
        assert!((j.lo + 1.0).abs() < 1e-8 && (j.hi - 1.0).abs() < 1e-8, "{j:?}");
        let j = binomial().j_interval().unwrap();
        assert_eq!((j.lo, j.hi), (f64::NEG_INFINITY, f64::INFINITY));
        // g > 0 on a wide grid backs the infinite endpoints.
        for q in uniform_grid(-20.0, 20.0, 0.25) {
            assert!(binomial().legendre_at_tangency(q) > 0.0);
        }
    }

    #[test]
    fn j_interval_lognormal_endpoints() {
        let model = WeightModel::lognormal(2, 0.05).unwrap();
        let j = model.j_interval().unwrap();
        let expected = (2.0 * LN_2 / 0.05).sqrt();
        assert!((j.hi - expected).abs() < 1e-8);
        assert!((j.lo + expected).abs() < 1e-8);
    }

    #[test]
    fn degenerate_model_fails_j_check() {
        let model = WeightModel::lognormal(2, 4.0 * LN_2).unwrap();
        assert!(matches!(model.j_interval(), Err(Error::ModelInconsistency(_))));
    }

    #[test]
    fn classify_examples() {
        assert_eq!(WeightModel::lebesgue(2).unwrap().classify(), Classification::Nondegenerate);
        assert_eq!(critical().classify(), Classification::Critical);
        // E Σ W ln W = σ²/2 - ln 2 by moment calculus.
        for (sigma2, expected) in [
            (2.0 * LN_2, Classification::Critical),
            (4.0 * LN_2, Classification::Degenerate),
            (0.5, Classification::Nondegenerate),
        ] {
            let model = WeightModel::lognormal(2, sigma2).unwrap();
            assert_eq!(model.classify(), expected);
            let e_wlnw = sigma2 / 2.0 - LN_2;
            let sign = if e_wlnw.abs() < 1e-12 {
                Classification::Critical
            } else if e_wlnw < 0.0 {
                Classification::Nondegenerate
            } else {
                Classification::Degenerate
            };
            assert_eq!(model.classify(), sign);
        }
    }

    #[test]
    fn q_transform_examples() {
        assert_eq!(q_transform(&[0.5, 0.5], 2.0, 1.0, 2), vec![0.5, 0.5]);
        let t = q_transform(&[0.25, 0.75], 0.0, -1.0, 2);
        assert!((t[0] - 0.5).abs() < 1e-15 && (t[1] - 0.5).abs() < 1e-15);
        let tau2 = binomial().tau_tilde(2.0).value();
        let t = q_transform(&[0.25, 0.75], 2.0, tau2, 2);
        assert!((t[0] - 0.1).abs() < 1e-12 && (t[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn tilt_consistency() {
        for model in [binomial(), WeightModel::lognormal(2, 0.3).unwrap(), WeightModel::two_point(2, 0.3, 0.7).unwrap()] {
            for q in [-2.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0] {
                let tilted = model.tilted(q).unwrap();
                assert!(tilted.tau_tilde(1.0).value().abs() < 1e-12, "{} q={q}", model.label());
                assert!((tilted.tau_tilde(0.0).value() + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_weights_determinism() {
        let model = WeightModel::lognormal(2, 0.4).unwrap();
        let w = Word::from_digits(2, &[1, 0, 1]).unwrap();
        let a = model.sample_weights(42, &w);
        let b = model.sample_weights(42, &w);
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, model.sample_weights(43, &w));
        assert_eq!(binomial().sample_weights(9, &w), vec![0.25, 0.75]);
    }

    #[test]
    fn sample_weights_mean_over_distinct_keys() {
        let model = WeightModel::lognormal(2, 0.4).unwrap();
        let sums: Vec<f64> = (0..10_000u64)
            .map(|i| model.sample_weights(5, &Word::new(2, 20, i).unwrap()).iter().sum())
            .collect();
        let (mean, se) = mean_and_se(&sums);
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let model = WeightModel::two_point(2, 0.3, 0.7)
            .unwrap()
            .with_monte_carlo(MonteCarloSettings { samples: 200_000, batches: 100, seed: 1 });
        for q in [-1.0, 0.5, 2.0] {
            let exact = model.tau_tilde(q).value();
            let mc = model.tau_tilde_monte_carlo(q);
            assert!((mc.value() - exact).abs() < 4.0 * mc.std_err() + 1e-12, "q={q}: {mc:?} vs {exact}");
        }
    }

    #[test]
    fn custom_model_monte_carlo_path() {
        let model = custom_uniform(200_000);
        assert!(!model.is_analytic());
        // Exact moments of U(0.2, 0.8): E W^q = (0.8^{q+1} - 0.2^{q+1}) / (0.6 (q+1)).
        for q in [0.5, 2.0, 3.0] {
            let moment = (0.8f64.powf(q + 1.0) - 0.2f64.powf(q + 1.0)) / (0.6 * (q + 1.0));
            let exact = -(2.0 * moment).log2();
            let est = model.tau_tilde(q);
            assert!((est.value() - exact).abs() < 4.0 * est.std_err() + 1e-9, "q={q}");
        }
        let slope = model.tau_tilde_prime(1.0);
        assert!(!slope.one_sided);
        assert!(slope.value > 0.0);
        assert_eq!(model.classify(), Classification::Nondegenerate);
        assert!((model.tau_tilde(0.0).value() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn custom_model_rejects_bad_normalization() {
        #[derive(Debug)]
        struct Heavy;
        impl WeightSampler for Heavy {
            fn sample(&self, _rng: &mut dyn RngCore, out: &mut [f64]) {
                out.fill(0.9);
            }
            fn label(&self) -> String {
                "constant 0.9".into()
            }
        }
        let err = WeightModel::custom(2, Arc::new(Heavy), MonteCarloSettings::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)));
    }

    #[test]
    fn normalization_over_registered_models() {
        for (name, spec) in ModelRegistry::standard().models {
            let model = spec.build().unwrap();
            let mut rng = keyed_rng(77, Purpose::MonteCarlo, 9, 0);
            let mut buf = vec![0.0; model.base() as usize];
            let sums: Vec<f64> = (0..100_000)
                .map(|_| {
                    model.draw(&mut rng, &mut buf);
                    buf.iter().sum()
                })
                .collect();
            let (mean, se) = mean_and_se(&sums);
            assert!((mean - 1.0).abs() <= 4.0 * se + 1e-12, "{name}: {mean} ± {se}");
        }
    }

    #[test]
    fn registry_round_trips_as_text() {
        let registry = ModelRegistry::standard();
        let text = registry.to_text();
        assert!(text.contains("kind = \"lognormal\""));
        assert_eq!(ModelRegistry::from_text(&text).unwrap(), registry);
        let spec = ModelSpec::TwoPoint { b: 2, low: 0.3, high: 0.7, p_low: None };
        assert_eq!(ModelSpec::from_text(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(WeightModel::deterministic(2, vec![0.5, 0.6]).is_err());
        assert!(WeightModel::deterministic(2, vec![0.0, 1.0]).is_err());
        assert!(WeightModel::deterministic(1, vec![1.0]).is_err());
        assert!(WeightModel::two_point(2, 0.6, 0.7).is_err());
        assert!(WeightModel::lognormal(2, -1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn tau_is_concave(w0 in 0.05f64..0.95, sigma2 in 0.01f64..1.0, lo in -6.0f64..0.0, step in 0.01f64..0.5) {
                let models = [
                    WeightModel::deterministic(2, vec![w0, 1.0 - w0]).unwrap(),
                    WeightModel::lognormal(2, sigma2).unwrap(),
                ];
                for model in &models {
                    let qs: Vec<f64> = (0..40).map(|k| lo + k as f64 * step).collect();
                    let t: Vec<f64> = qs.iter().map(|&q| model.tau_tilde(q).value()).collect();
                    for win in t.windows(3) {
                        prop_assert!(win[0] - 2.0 * win[1] + win[2] <= 1e-9);
                    }
                }
            }

            #[test]
            fn closed_form_derivative_matches_difference(w0 in 0.05f64..0.95, q in -5.0f64..5.0) {
                let model = WeightModel::deterministic(2, vec![w0, 1.0 - w0]).unwrap();
                let h = 1e-5;
                let fd = (model.tau_tilde(q + h).value() - model.tau_tilde(q - h).value()) / (2.0 * h);
                prop_assert!((fd - model.tau_tilde_prime(q).value).abs() < 1e-6);
            }
        }
    }
}
