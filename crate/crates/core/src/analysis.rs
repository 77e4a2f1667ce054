//! Structure functions, Legendre transforms, large-deviation box counts and GS′.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeTree, Construction};
use crate::error::{Error, Result};
use crate::field::MassField;
use crate::output::{fmt_float, Table};
use crate::sequences::EpsSequence;
use crate::weights::{log_sum_exp, uniform_grid, TauFunction, WeightModel};
use crate::word::Word;

/// Default q-grid for Legendre transforms.
pub fn default_q_grid() -> Vec<f64> {
    uniform_grid(-10.0, 10.0, 1e-3)
}

/// Slack absorbing rounding in `log_b` masses when testing closed bands.
const BAND_SLACK: f64 = 1e-10;

/// `τ_n(q) = -(1/n) log_b Σ_{|v| = n} μ(I_v)^q`, summed over boxes of positive mass.
pub fn partition_function(field: &MassField, n: u32, q: f64) -> Result<f64> {
    if n == 0 || n > field.depth() {
        return Err(Error::Domain(format!("depth {n} outside 1..={}", field.depth())));
    }
    let terms: Vec<f64> = field
        .ln_level(n)
        .iter()
        .filter(|l| l.is_finite())
        .map(|l| q * l)
        .collect();
    let lnb = (field.base() as f64).ln();
    Ok(-log_sum_exp(&terms) / (n as f64 * lnb))
}

/// Samples `(q, τ(q))` of a concave function on a strictly increasing grid.
pub trait TauSamples {
    fn q_grid(&self) -> &[f64];
    fn tau_values(&self) -> &[f64];
}

impl TauSamples for TauFunction {
    fn q_grid(&self) -> &[f64] {
        &self.qs
    }
    fn tau_values(&self) -> &[f64] {
        &self.values
    }
}

/// `τ^w_n` of a copy `μ^w` on a q-grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureFunction {
    pub root: Vec<u32>,
    pub n: u32,
    pub qs: Vec<f64>,
    pub values: Vec<f64>,
}

impl StructureFunction {
    pub fn compute(field: &MassField, n: u32, qs: &[f64]) -> Result<Self> {
        let values = qs.par_iter().map(|&q| partition_function(field, n, q)).collect::<Result<Vec<_>>>()?;
        Ok(StructureFunction { root: field.meta().root.clone(), n, qs: qs.to_vec(), values })
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["q", "tau_n"]);
        for (q, v) in self.qs.iter().zip(&self.values) {
            t.push(vec![fmt_float(*q), fmt_float(*v)]);
        }
        t
    }
}

impl TauSamples for StructureFunction {
    fn q_grid(&self) -> &[f64] {
        &self.qs
    }
    fn tau_values(&self) -> &[f64] {
        &self.values
    }
}

/// `τ*(α) = inf_q (αq - τ(q))` with the minimizer and a flag raised when
/// the infimum sits on the edge of the q-range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegendreValue {
    pub value: f64,
    pub argmin: f64,
    pub at_boundary: bool,
}

/// Discrete infimum over the grid refined by the vertex of the parabola
/// through the minimizing sample and its two neighbors.
pub fn legendre(samples: &impl TauSamples, alpha: f64) -> LegendreValue {
    legendre_on(samples.q_grid(), samples.tau_values(), alpha)
}

pub fn legendre_on(qs: &[f64], taus: &[f64], alpha: f64) -> LegendreValue {
    assert_eq!(qs.len(), taus.len());
    assert!(!qs.is_empty());
    let f = |k: usize| alpha * qs[k] - taus[k];
    let mut best = 0;
    for k in 1..qs.len() {
        if f(k) < f(best) {
            best = k;
        }
    }
    if best == 0 || best + 1 == qs.len() {
        return LegendreValue { value: f(best), argmin: qs[best], at_boundary: true };
    }
    let (x0, x1, x2) = (qs[best - 1], qs[best], qs[best + 1]);
    let (y0, y1, y2) = (f(best - 1), f(best), f(best + 1));
    let num = (x1 - x0).powi(2) * (y1 - y2) - (x1 - x2).powi(2) * (y1 - y0);
    let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
    let mut out = LegendreValue { value: y1, argmin: x1, at_boundary: false };
    if den != 0.0 && y0.is_finite() && y2.is_finite() {
        let xv = x1 - 0.5 * num / den;
        if xv > x0 && xv < x2 {
            let yv = y0 * (xv - x1) * (xv - x2) / ((x0 - x1) * (x0 - x2))
                + y1 * (xv - x0) * (xv - x2) / ((x1 - x0) * (x1 - x2))
                + y2 * (xv - x0) * (xv - x1) / ((x2 - x0) * (x2 - x1));
            if yv <= y1 {
                out = LegendreValue { value: yv, argmin: xv, at_boundary: false };
            }
        }
    }
    out
}

/// Search range of the tangency point in [`model_legendre`].
const TANGENCY_SEARCH: f64 = 64.0;

/// τ̃*(α) for a weight model: the tangency point `τ̃'(q) = α` is found by
/// bisection, giving `τ̃*(α) = αq - τ̃(q)`. Outside the range of τ̃' on the
/// search interval the endpoint value is returned with the boundary flag.
pub fn model_legendre(model: &WeightModel, alpha: f64) -> LegendreValue {
    let slope = |q: f64| model.tau_tilde_prime(q).value;
    let at = |q: f64, boundary: bool| LegendreValue {
        value: alpha * q - model.tau_tilde(q).value(),
        argmin: q,
        at_boundary: boundary,
    };
    let (mut lo, mut hi) = (-TANGENCY_SEARCH, TANGENCY_SEARCH);
    if alpha >= slope(lo) {
        return at(lo, true);
    }
    if alpha <= slope(hi) {
        return at(hi, true);
    }
    // τ̃' is non-increasing: slope(lo) > α > slope(hi).
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    at(0.5 * (lo + hi), false)
}

/// `N_n(α, ε) = #{|w| = n : b^{-n(α+ε)} <= μ(I_w) <= b^{-n(α-ε)}}`.
pub fn box_count(field: &MassField, n: u32, alpha: f64, epsilon: f64) -> Result<u64> {
    if n > field.depth() {
        return Err(Error::Domain(format!("depth {n} exceeds field depth {}", field.depth())));
    }
    let lnb = (field.base() as f64).ln();
    let nf = n as f64;
    let (lo, hi) = (-nf * (alpha + epsilon) - BAND_SLACK, -nf * (alpha - epsilon) + BAND_SLACK);
    Ok(field
        .ln_level(n)
        .iter()
        .map(|l| l / lnb)
        .filter(|x| *x >= lo && *x <= hi)
        .count() as u64)
}

/// Coarse spectrum at one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub n: u32,
    pub alphas: Vec<f64>,
    pub epsilon: f64,
    pub eps_sequence: EpsSequence,
    pub counts: Vec<u64>,
    /// `(1/n) log_b N_n(α, ε_n)`; `-inf` marks an empty count.
    pub ld: Vec<f64>,
    pub legendre: Option<Vec<LegendreValue>>,
}

pub fn ld_spectrum(field: &MassField, n: u32, alphas: &[f64], eps: &EpsSequence) -> Result<SpectrumEstimate> {
    if n == 0 {
        return Err(Error::Domain("large-deviation spectrum needs n >= 1".into()));
    }
    let epsilon = eps.at(n);
    let counts = alphas.par_iter().map(|&a| box_count(field, n, a, epsilon)).collect::<Result<Vec<_>>>()?;
    let lnb = (field.base() as f64).ln();
    let ld = counts
        .iter()
        .map(|&c| if c == 0 { f64::NEG_INFINITY } else { (c as f64).ln() / (n as f64 * lnb) })
        .collect();
    Ok(SpectrumEstimate {
        n,
        alphas: alphas.to_vec(),
        epsilon,
        eps_sequence: eps.clone(),
        counts,
        ld,
        legendre: None,
    })
}

impl SpectrumEstimate {
    pub fn with_legendre(mut self, samples: &(impl TauSamples + Sync)) -> Self {
        self.legendre = Some(self.alphas.par_iter().map(|&a| legendre(samples, a)).collect());
        self
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["alpha", "count", "ld", "legendre"]);
        for (k, a) in self.alphas.iter().enumerate() {
            let leg = self.legendre.as_ref().map_or(f64::NAN, |l| l[k].value);
            t.push(vec![fmt_float(*a), self.counts[k].to_string(), fmt_float(self.ld[k]), fmt_float(leg)]);
        }
        t
    }
}

/// GS′ on a finite horizon: the smallest `p` in `[p_min, n_max]` such that
/// `|(1/n) log_b N_n(α, ε_n) - τ*(α)| <= ε_n` for every `n` in `[p, n_max]`,
/// with `n_max` the field depth. `None` when even `n_max` fails.
pub fn gs_prime(field: &MassField, alpha: f64, tau_star: f64, eps: &EpsSequence, p_min: u32) -> Result<Option<u32>> {
    if !(tau_star > 0.0) {
        return Err(Error::Domain(format!("GS′ needs τ*(α) > 0, got τ*({alpha}) = {tau_star}")));
    }
    let n_max = field.depth();
    let p_min = p_min.max(1);
    let lnb = (field.base() as f64).ln();
    let mut p = None;
    for n in (p_min..=n_max).rev() {
        let e = eps.at(n);
        let count = box_count(field, n, alpha, e)?;
        let nf = n as f64;
        // b^{n(τ* - ε)} <= N <= b^{n(τ* + ε)}, compared in log_b.
        let ok = count > 0 && {
            let x = (count as f64).ln() / lnb;
            x >= nf * (tau_star - e) - BAND_SLACK && x <= nf * (tau_star + e) + BAND_SLACK
        };
        if !ok {
            break;
        }
        p = Some(n);
    }
    Ok(p)
}

/// GS′ of the copy `μ^w` of a realization, with τ*(α) from the weight model.
pub fn gs_prime_of_copy(
    tree: &CascadeTree,
    w: &Word,
    alpha: f64,
    eps: &EpsSequence,
    p_min: u32,
    n_max: u32,
    tail_depth: u32,
) -> Result<Option<u32>> {
    let tau_star = model_legendre(tree.model(), alpha).value;
    if !(tau_star > 0.0) {
        return Err(Error::Domain(format!("GS′ needs τ*(α) > 0, got τ*({alpha}) = {tau_star}")));
    }
    let field = tree.copy_field(w, n_max, None, Construction::Nondegenerate, tail_depth)?;
    gs_prime(&field, alpha, tau_star, eps, p_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn binomial_field(n: u32) -> MassField {
        let tree = CascadeTree::new(Arc::new(WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap()), 0);
        tree.leaf_masses(n, None, Construction::Nondegenerate, 0).unwrap()
    }

    fn lebesgue_field(n: u32) -> MassField {
        MassField::from_leaf_masses(2, vec![2f64.powi(-(n as i32)); 1 << n]).unwrap()
    }

    fn binomial_tau(q: f64) -> f64 {
        -(0.25f64.powf(q) + 0.75f64.powf(q)).log2()
    }

    #[test]
    fn partition_function_examples() {
        let f = binomial_field(10);
        for q in [-3.0, -0.5, 0.0, 1.0, 2.5] {
            for n in [1, 5, 10] {
                assert!((partition_function(&f, n, q).unwrap() - binomial_tau(q)).abs() < 1e-12);
            }
        }
        assert!((partition_function(&f, 7, 0.0).unwrap() + 1.0).abs() < 1e-15);
        let leb = lebesgue_field(6);
        for q in [-2.0, 0.5, 3.0] {
            assert!((partition_function(&leb, 6, q).unwrap() - (q - 1.0)).abs() < 1e-12);
        }
        assert!(partition_function(&leb, 0, 1.0).is_err());
        assert!(partition_function(&leb, 7, 1.0).is_err());
    }

    #[test]
    fn structure_function_at_one_is_total_mass() {
        let f = MassField::from_leaf_masses(2, vec![0.1, 0.3, 0.2, 0.6]).unwrap();
        let s = StructureFunction::compute(&f, 2, &[0.0, 1.0]).unwrap();
        assert!((s.values[0] + 1.0).abs() < 1e-15);
        assert!((s.values[1] + 1.2f64.log2() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn legendre_examples() {
        let qs = uniform_grid(-5.0, 5.0, 1e-3);
        let linear: Vec<f64> = qs.iter().map(|q| q - 1.0).collect();
        assert!((legendre_on(&qs, &linear, 1.0).value - 1.0).abs() < 1e-12);

        let model = WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap();
        let tf = TauFunction::tabulate(&model, &qs).unwrap();
        let a0 = model.tau_tilde_prime(0.0).value;
        let l0 = legendre(&tf, a0);
        assert!((l0.value - 1.0).abs() < 1e-9, "{l0:?}");
        assert!(l0.argmin.abs() < 1e-3);
        let a1 = model.tau_tilde_prime(1.0).value;
        assert!((legendre(&tf, a1).value - a1).abs() < 1e-9);
        assert!((model_legendre(&model, a0).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn legendre_flags_boundary() {
        let qs = uniform_grid(-1.0, 1.0, 0.1);
        let taus: Vec<f64> = qs.iter().map(|q| q - 1.0).collect();
        assert!(legendre_on(&qs, &taus, 2.0).at_boundary);
        let model = WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap();
        assert!(model_legendre(&model, 5.0).at_boundary);
    }

    #[test]
    fn legendre_duality_on_lognormal() {
        let model = WeightModel::lognormal(2, 0.2).unwrap();
        let tf = TauFunction::tabulate(&model, &default_q_grid()).unwrap();
        for k in -30..=30 {
            let q = k as f64 / 10.0;
            let alpha = model.tau_tilde_prime(q).value;
            let got = legendre(&tf, alpha).value;
            assert!((got - model.legendre_at_tangency(q)).abs() <= 2e-3, "q={q}");
        }
    }

    #[test]
    fn box_count_examples() {
        let leb = lebesgue_field(8);
        assert_eq!(box_count(&leb, 8, 1.0, 1e-6).unwrap(), 256);
        assert_eq!(box_count(&leb, 8, 1.0, 0.0).unwrap(), 256);
        assert_eq!(box_count(&leb, 8, 2.0, 0.1).unwrap(), 0);

        // Oracle: a word with k digits 0 has mass 4^{-k} (3/4)^{8-k}, multiplicity C(8, k).
        let f = binomial_field(8);
        let mut expected = 0u64;
        for k in 0..=8u32 {
            let x = (2.0 * k as f64 + (8 - k) as f64 * (4.0f64 / 3.0).log2()) / 8.0;
            if (0.8..=1.2).contains(&x) {
                expected += (1..=k as u64).fold(1u64, |acc, i| acc * (8 - k as u64 + i) / i);
            }
        }
        assert_eq!(box_count(&f, 8, 1.0, 0.2).unwrap(), expected);
    }

    #[test]
    fn ld_spectrum_examples() {
        let leb = lebesgue_field(8);
        let spec = ld_spectrum(&leb, 8, &[0.5, 1.0, 1.5], &EpsSequence::Constant { value: 0.1 }).unwrap();
        assert_eq!(spec.ld[0], f64::NEG_INFINITY);
        assert!((spec.ld[1] - 1.0).abs() < 1e-12);
        assert_eq!(spec.ld[2], f64::NEG_INFINITY);
    }

    #[test]
    fn ld_support_shrinks_with_depth() {
        let eps = EpsSequence::RootLog { eta: 0.5 };
        let alphas = uniform_grid(0.2, 2.2, 0.01);
        let support = |n: u32| -> usize {
            let s = ld_spectrum(&binomial_field(n), n, &alphas, &eps).unwrap();
            s.ld.iter().filter(|v| v.is_finite()).count()
        };
        assert!(support(12) <= support(8));
    }

    #[test]
    fn gs_prime_examples() {
        let leb = lebesgue_field(10);
        let eps = EpsSequence::RootLog { eta: 0.5 };
        assert_eq!(gs_prime(&leb, 1.0, 1.0, &eps, 1).unwrap(), Some(1));
        assert!(matches!(gs_prime(&leb, 1.0, -0.1, &eps, 1), Err(Error::Domain(_))));
        let tree = CascadeTree::new(Arc::new(WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap()), 0);
        assert!(gs_prime_of_copy(&tree, &Word::empty(2), 3.0, &eps, 1, 8, 0).is_err());
    }

    #[test]
    fn gs_prime_matches_exhaustive_scan() {
        let model = WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap();
        let alpha = model.tau_tilde_prime(1.0).value;
        let tau_star = model_legendre(&model, alpha).value;
        let f = binomial_field(14);
        let eps = EpsSequence::RootLog { eta: 0.5 };
        let holds = |n: u32| {
            let c = box_count(&f, n, alpha, eps.at(n)).unwrap() as f64;
            let (lo, hi) = (2f64.powf(n as f64 * (tau_star - eps.at(n))), 2f64.powf(n as f64 * (tau_star + eps.at(n))));
            c >= lo * (1.0 - 1e-12) && c <= hi * (1.0 + 1e-12)
        };
        let oracle = (1..=14).find(|&p| (p..=14).all(holds));
        assert_eq!(gs_prime(&f, alpha, tau_star, &eps, 1).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn box_count_monotone_in_epsilon(a in 0.3f64..2.0, e1 in 0.0f64..0.5, de in 0.0f64..0.5) {
            let f = binomial_field(9);
            prop_assert!(box_count(&f, 9, a, e1).unwrap() <= box_count(&f, 9, a, e1 + de).unwrap());
        }

        #[test]
        fn structure_function_is_concave(seed in 0u64..1000) {
            let tree = CascadeTree::new(Arc::new(WeightModel::lognormal(2, 0.3).unwrap()), seed);
            let f = tree.leaf_masses(8, None, Construction::Nondegenerate, 0).unwrap();
            let qs = uniform_grid(-4.0, 4.0, 0.25);
            let s = StructureFunction::compute(&f, 8, &qs).unwrap();
            for k in 1..qs.len() - 1 {
                prop_assert!(s.values[k - 1] - 2.0 * s.values[k] + s.values[k + 1] <= 1e-9);
            }
            prop_assert!((s.values[16] + 1.0).abs() < 1e-12);
        }

        #[test]
        fn tilted_field_partition_at_one(seed in 0u64..500, q in -1.5f64..2.5) {
            let tree = CascadeTree::new(Arc::new(WeightModel::lognormal(2, 0.2).unwrap()), seed);
            let f = tree.leaf_masses(6, Some(q), Construction::Nondegenerate, 0).unwrap();
            let tau1 = partition_function(&f, 6, 1.0).unwrap();
            prop_assert!((tau1 + f.total_mass().log2() / 6.0).abs() < 1e-12);
        }
    }
}
