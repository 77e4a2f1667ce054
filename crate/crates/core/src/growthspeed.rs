//! Fine level sets with the neighboring-box condition, growth speeds and
//! the diagnostic sums `S_n^{N,ε,η}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MassField;
use crate::sequences::EpsSequence;
use crate::weights::log_sum_exp;
use crate::word::Word;

const BAND_SLACK: f64 = 1e-10;

/// Default fraction of the analyzing measure in [`growth_speed`].
pub const DEFAULT_FRACTION: f64 = 0.5;

/// Words `v` with `|v| = |w|` and `δ(v, w) <= N`, clipped at the ends of `[0, 1]`.
pub fn neighbors(w: &Word, n: u64) -> Vec<Word> {
    let count = (w.base() as u64).pow(w.len());
    let lo = w.index().saturating_sub(n);
    let hi = w.index().saturating_add(n).min(count - 1);
    (lo..=hi).map(|i| Word::new(w.base(), w.len(), i).expect("index in range")).collect()
}

/// Per-leaf indicator of `E_{α,p}(N, ε̃)` at the horizon `n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetMask {
    pub base: u32,
    pub n_max: u32,
    pub p: u32,
    pub alpha: f64,
    pub neighbor_radius: u64,
    pub leaves: Vec<bool>,
    pub warning: Option<String>,
}

impl LevelSetMask {
    pub fn count(&self) -> usize {
        self.leaves.iter().filter(|x| **x).count()
    }
}

/// `band[n][i]`: every neighbor `v` of the depth-`n` word `i` satisfies
/// `b^{-n(α+ε_n)} <= μ(I_v) <= b^{-n(α-ε_n)}`.
fn neighborhood_band(field: &MassField, n: u32, alpha: f64, radius: u64, eps: f64) -> Vec<bool> {
    let lnb = (field.base() as f64).ln();
    let nf = n as f64;
    let (lo, hi) = (-nf * (alpha + eps) - BAND_SLACK, -nf * (alpha - eps) + BAND_SLACK);
    let ok: Vec<bool> = field
        .ln_level(n)
        .iter()
        .map(|l| {
            let x = l / lnb;
            x >= lo && x <= hi
        })
        .collect();
    // Sliding count of failures within the window [i - N, i + N].
    let len = ok.len();
    let r = radius.min(len as u64) as usize;
    let mut prefix = vec![0usize; len + 1];
    for (i, good) in ok.iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(!good);
    }
    (0..len)
        .map(|i| {
            let a = i.saturating_sub(r);
            let b = (i + r).min(len - 1);
            prefix[b + 1] == prefix[a]
        })
        .collect()
}

fn check_inputs(field: &MassField, n_max: u32, eps: &EpsSequence) -> Result<()> {
    if n_max > field.depth() {
        return Err(Error::Domain(format!("horizon {n_max} exceeds field depth {}", field.depth())));
    }
    eps.validate()
}

/// Depth-`n_max` leaves whose interval lies in `E_{α,p}(N, ε̃)` truncated at
/// `n_max`: for every `n` in `[p, n_max]` the ancestor at depth `n` and its
/// `N` nearest neighbors on each side all satisfy the ε̃_n band around α.
pub fn level_set_mask(
    field: &MassField,
    alpha: f64,
    p: u32,
    radius: u64,
    eps: &EpsSequence,
    n_max: u32,
) -> Result<LevelSetMask> {
    check_inputs(field, n_max, eps)?;
    if p == 0 {
        return Err(Error::Domain("start scale p must be at least 1".into()));
    }
    let b = field.base() as usize;
    let leaves = b.pow(n_max);
    let mut mask = LevelSetMask {
        base: field.base(),
        n_max,
        p,
        alpha,
        neighbor_radius: radius,
        leaves: vec![true; leaves],
        warning: None,
    };
    if p > n_max {
        mask.warning = Some(format!("p = {p} > n_max = {n_max}: no condition is checked"));
        return Ok(mask);
    }
    for n in p..=n_max {
        let band = neighborhood_band(field, n, alpha, radius, eps.at(n));
        let span = b.pow(n_max - n);
        mask.leaves.par_iter_mut().enumerate().for_each(|(leaf, slot)| {
            *slot = *slot && band[leaf / span];
        });
    }
    Ok(mask)
}

/// `m(∪ I_leaf)` over the leaves of the mask.
pub fn set_measure(m: &MassField, mask: &LevelSetMask) -> Result<f64> {
    if m.depth() < mask.n_max || m.base() != mask.base {
        return Err(Error::Domain("measure field does not cover the mask".into()));
    }
    let terms: Vec<f64> = m
        .ln_level(mask.n_max)
        .iter()
        .zip(&mask.leaves)
        .filter(|(_, keep)| **keep)
        .map(|(l, _)| *l)
        .collect();
    Ok(log_sum_exp(&terms).exp())
}

/// For every leaf, the largest depth `n <= n_max` at which its neighborhood
/// leaves the band (0 if none). The mask at `p` keeps exactly the leaves
/// whose last failure is below `p`.
pub fn last_failure_depths(
    mu: &MassField,
    alpha: f64,
    radius: u64,
    eps: &EpsSequence,
    n_max: u32,
) -> Result<Vec<u32>> {
    check_inputs(mu, n_max, eps)?;
    let b = mu.base() as usize;
    let mut last = vec![0u32; b.pow(n_max)];
    for n in 1..=n_max {
        let band = neighborhood_band(mu, n, alpha, radius, eps.at(n));
        let span = b.pow(n_max - n);
        last.par_iter_mut().enumerate().for_each(|(leaf, slot)| {
            if !band[leaf / span] {
                *slot = n;
            }
        });
    }
    Ok(last)
}

/// GS on a finite horizon: the smallest `p <= n_max` with
/// `m(E_{α,p}(N, ε̃)) >= f ‖m‖`, or `None`.
pub fn growth_speed(
    m: &MassField,
    mu: &MassField,
    alpha: f64,
    radius: u64,
    eps: &EpsSequence,
    fraction: f64,
    n_max: u32,
) -> Result<Option<u32>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("fraction {fraction} outside (0, 1)")));
    }
    if m.depth() < n_max || m.base() != mu.base() {
        return Err(Error::Domain("measure field does not cover the horizon".into()));
    }
    let last = last_failure_depths(mu, alpha, radius, eps, n_max)?;
    // Mass of the leaves by last failing depth, then cumulated over p.
    let mut by_depth = vec![Vec::new(); n_max as usize + 1];
    for (l, depth) in m.ln_level(n_max).iter().zip(&last) {
        by_depth[*depth as usize].push(*l);
    }
    let target = fraction * m.total_mass();
    let mut acc = Vec::new();
    for p in 1..=n_max {
        acc.extend_from_slice(&by_depth[p as usize - 1]);
        if log_sum_exp(&acc).exp() >= target {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

/// `S_n = Σ_{γ=±1} b^{n(α-γε)γη} Σ_{δ(v,w)<=N} m(I_v) μ(I_w)^{γη}` at depth `n`.
pub fn s_diagnostic(m: &MassField, mu: &MassField, alpha: f64, radius: u64, epsilon: f64, eta: f64, n: u32) -> Result<f64> {
    if n > m.depth() || n > mu.depth() || m.base() != mu.base() {
        return Err(Error::Domain(format!("depth {n} not available in both fields")));
    }
    let lnb = (m.base() as f64).ln();
    let ml = m.ln_level(n);
    let ul = mu.ln_level(n);
    let len = ml.len();
    let r = radius.min(len as u64) as usize;
    let mut total = 0.0;
    for gamma in [-1.0, 1.0] {
        let scale = lnb * n as f64 * (alpha - gamma * epsilon) * gamma * eta;
        let mut terms = Vec::with_capacity(len * (2 * r + 1));
        for (v, m_v) in ml.iter().enumerate() {
            for u_w in &ul[v.saturating_sub(r)..=(v + r).min(len - 1)] {
                let pow = if eta == 0.0 { 0.0 } else { gamma * eta * u_w };
                terms.push(scale + m_v + pow);
            }
        }
        total += log_sum_exp(&terms).exp();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{CascadeTree, Construction};
    use crate::weights::WeightModel;
    use std::sync::Arc;

    fn lebesgue(n: u32) -> MassField {
        MassField::from_leaf_masses(2, vec![2f64.powi(-(n as i32)); 1 << n]).unwrap()
    }

    fn binomial(n: u32) -> MassField {
        let tree = CascadeTree::new(Arc::new(WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap()), 0);
        tree.leaf_masses(n, None, Construction::Nondegenerate, 0).unwrap()
    }

    #[test]
    fn neighbor_examples() {
        let w0 = Word::new(2, 3, 0).unwrap();
        assert_eq!(neighbors(&w0, 1).iter().map(|w| w.index()).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(neighbors(&Word::new(2, 3, 4).unwrap(), 1).len(), 3);
        assert_eq!(neighbors(&Word::new(2, 3, 7).unwrap(), 2).len(), 3);
        assert_eq!(neighbors(&w0, 0), vec![w0]);
    }

    #[test]
    fn lebesgue_masks() {
        let f = lebesgue(10);
        let all = level_set_mask(&f, 1.0, 1, 2, &EpsSequence::RootLog { eta: 0.5 }, 10).unwrap();
        assert_eq!(all.count(), 1024);
        let none = level_set_mask(&f, 1.5, 1, 1, &EpsSequence::Constant { value: 0.1 }, 10).unwrap();
        assert_eq!(none.count(), 0);
        let empty = level_set_mask(&f, 1.5, 11, 1, &EpsSequence::Constant { value: 0.1 }, 10).unwrap();
        assert_eq!(empty.count(), 1024);
        assert!(empty.warning.is_some());
    }

    #[test]
    fn set_measure_examples() {
        let f = lebesgue(4);
        let mut mask = level_set_mask(&f, 1.0, 1, 0, &EpsSequence::Constant { value: 0.1 }, 4).unwrap();
        assert!((set_measure(&f, &mask).unwrap() - 1.0).abs() < 1e-12);
        for (i, leaf) in mask.leaves.iter_mut().enumerate() {
            *leaf = i % 2 == 0;
        }
        assert!((set_measure(&f, &mask).unwrap() - 0.5).abs() < 1e-12);
        mask.leaves.iter_mut().for_each(|l| *l = false);
        assert_eq!(set_measure(&f, &mask).unwrap(), 0.0);
    }

    #[test]
    fn growth_speed_lebesgue_and_fraction_monotone() {
        let f = lebesgue(8);
        let eps = EpsSequence::RootLog { eta: 0.5 };
        assert_eq!(growth_speed(&f, &f, 1.0, 1, &eps, 0.5, 8).unwrap(), Some(1));
        let mu = binomial(12);
        let model = WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap();
        let alpha = model.tau_tilde_prime(2.0).value;
        let mut previous = Some(0);
        for f in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let gs = growth_speed(&mu, &mu, alpha, 1, &eps, f, 12).unwrap();
            assert!(previous.is_none() || gs.is_none() || gs >= previous);
            if gs.is_none() {
                previous = None;
            } else {
                previous = gs;
            }
        }
        assert!(growth_speed(&f, &f, 1.0, 1, &eps, 1.0, 8).is_err());
    }

    #[test]
    fn mask_monotone_in_p() {
        let mu = binomial(10);
        let eps = EpsSequence::RootLog { eta: 0.5 };
        let mut previous = level_set_mask(&mu, 1.2, 1, 1, &eps, 10).unwrap();
        for p in 2..=10 {
            let mask = level_set_mask(&mu, 1.2, p, 1, &eps, 10).unwrap();
            assert!(previous.leaves.iter().zip(&mask.leaves).all(|(a, b)| !a || *b));
            previous = mask;
        }
    }

    #[test]
    fn s_diagnostic_closed_form() {
        let f = lebesgue(4);
        let s = s_diagnostic(&f, &f, 1.0, 1, 0.5, 0.5, 4).unwrap();
        assert!((s - 2.875).abs() < 1e-12, "{s}");
        let s0 = s_diagnostic(&f, &f, 1.0, 1, 0.5, 0.0, 4).unwrap();
        assert!((s0 - 2.0 * 46.0 / 16.0).abs() < 1e-12);
    }
}
