//! Point systems, the conditioned limsup sets `K(α, ξ)`, the target
//! selection map and a box-counting dimension estimate.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeTree, Construction};
use crate::error::{Error, Result};
use crate::field::MassField;
use crate::growthspeed::growth_speed;
use crate::sequences::{EpsSequence, RhoSequence, SjSequence};
use crate::word::{checked_pow, max_len, Word};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemItem {
    /// Position `n >= 1` in the enumeration of the system.
    pub n: usize,
    pub x: f64,
    pub lambda: f64,
    /// `k` with `λ ∈ (b^{-(k+1)}, b^{-k}]`.
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSystem {
    base: u32,
    items: Vec<SystemItem>,
    by_level: BTreeMap<u32, Vec<usize>>,
}

/// Level `k` with `λ ∈ (b^{-(k+1)}, b^{-k}]`.
fn level_of(base: u32, lambda: f64) -> u32 {
    let b = base as f64;
    let mut k = (-lambda.ln() / b.ln()).floor().max(0.0) as u32;
    // Correct rounding of the logarithm at exact powers.
    while lambda > b.powi(-(k as i32)) && k > 0 {
        k -= 1;
    }
    while lambda <= b.powi(-(k as i32 + 1)) {
        k += 1;
    }
    k
}

impl PointSystem {
    /// `{(k b^{-j}, b^{-j}) : 0 <= k <= b^j, 1 <= j <= horizon}`, deduplicated by `(x, j)`.
    pub fn badic(base: u32, horizon: u32) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for j in 1..=horizon {
            let count = checked_pow(base, j)?;
            let lambda = (base as f64).powi(-(j as i32));
            for k in 0..=count {
                let x = k as f64 * lambda;
                if seen.insert((x.to_bits(), j)) {
                    pairs.push((x, lambda));
                }
            }
        }
        PointSystem::custom(base, pairs)
    }

    pub fn custom(base: u32, pairs: Vec<(f64, f64)>) -> Result<Self> {
        if base < 2 {
            return Err(Error::Domain(format!("base {base} < 2")));
        }
        let mut items = Vec::with_capacity(pairs.len());
        let mut by_level: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (x, lambda)) in pairs.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&x) || !(lambda > 0.0 && lambda <= 1.0) {
                return Err(Error::Domain(format!("system item ({x}, {lambda}) outside [0,1] x (0,1]")));
            }
            let level = level_of(base, lambda);
            by_level.entry(level).or_default().push(i);
            items.push(SystemItem { n: i + 1, x, lambda, level });
        }
        Ok(PointSystem { base, items, by_level })
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn items(&self) -> &[SystemItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn level(&self, k: u32) -> impl Iterator<Item = &SystemItem> {
        self.by_level.get(&k).into_iter().flatten().map(|&i| &self.items[i])
    }

    pub fn max_level(&self) -> Option<u32> {
        self.by_level.keys().next_back().copied()
    }

    /// Fraction of the grid `{i b^{-g}}` covered by some `B(x_n, r λ_n)` at a
    /// level in the upper half of `[1, horizon]`.
    pub fn covering_fraction(&self, grid_depth: u32, r: f64, horizon: u32) -> Result<f64> {
        let count = checked_pow(self.base, grid_depth)?;
        let from = horizon.div_ceil(2).max(1);
        let covered = (0..=count)
            .into_par_iter()
            .filter(|&i| {
                let t = i as f64 / count as f64;
                (from..=horizon).any(|k| self.level(k).any(|it| (t - it.x).abs() <= r * it.lambda))
            })
            .count();
        Ok(covered as f64 / (count + 1) as f64)
    }
}

/// `B_{k,r}(t)`: the items at level `k` with `t ∈ B(x_n, r λ_n)`.
pub fn balls_at(t: f64, k: u32, r: f64, system: &PointSystem) -> Result<Vec<SystemItem>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Domain(format!("radius factor {r} outside (0, 1]")));
    }
    Ok(system.level(k).filter(|it| (t - it.x).abs() <= r * it.lambda).copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub u: Word,
    /// `n(w)`, `None` when `R_w` is empty and the fallback is used.
    pub n: Option<usize>,
    /// `|u| / (ξ k)` with `k = |w| - 3`.
    pub ratio: f64,
}

/// Leftmost b-adic interval of maximal length inside `[lo, hi] ∩ [0, 1]`.
pub fn maximal_badic_inside(base: u32, lo: f64, hi: f64) -> Result<Word> {
    let (lo, hi) = (lo.max(0.0), hi.min(1.0));
    if !(hi > lo) {
        return Err(Error::Domain(format!("interval [{lo}, {hi}] has empty interior")));
    }
    for g in 0..=max_len(base) {
        let count = checked_pow(base, g)?;
        let scale = count as f64;
        let first = (lo * scale).ceil() as u64;
        if first < count && (first + 1) as f64 / scale <= hi {
            return Word::new(base, g, first);
        }
    }
    Err(Error::WordTooLong { base, len: max_len(base) + 1 })
}

/// `u(w)` for `w` of length `k + 3`.
pub fn select_target(w: &Word, xi: f64, system: &PointSystem) -> Result<TargetSelection> {
    if !(xi > 1.0) {
        return Err(Error::Domain(format!("ξ = {xi} must exceed 1")));
    }
    if w.len() < 4 {
        return Err(Error::Domain(format!("word length {} < 4", w.len())));
    }
    let k = w.len() - 3;
    let (a, c) = w.interval();
    // R_w: items at level k whose ball B(x, λ/4) meets I_w.
    let mut chosen: Option<&SystemItem> = None;
    for it in system.level(k) {
        let dist = if it.x < a { a - it.x } else if it.x > c { it.x - c } else { 0.0 };
        if dist <= it.lambda / 4.0 {
            chosen = match chosen {
                Some(best) if (best.x, best.n) <= (it.x, it.n) => Some(best),
                _ => Some(it),
            };
        }
    }
    let u = match chosen {
        Some(it) => {
            let r = it.lambda.powf(xi);
            maximal_badic_inside(w.base(), it.x - r, it.x + r)?
        }
        None => {
            let target = (xi * w.len() as f64).floor() as u32;
            w.concat(&Word::new(w.base(), target - w.len(), 0)?)?
        }
    };
    Ok(TargetSelection { u, n: chosen.map(|it| it.n), ratio: u.len() as f64 / (xi * k as f64) })
}

/// Sorted, merged closed intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub intervals: Vec<(f64, f64)>,
}

impl IntervalSet {
    pub fn from_intervals(mut raw: Vec<(f64, f64)>) -> Self {
        raw.retain(|(a, b)| a <= b);
        raw.sort_by(|x, y| x.partial_cmp(y).expect("finite endpoints"));
        let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (a, b) in raw {
            match intervals.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => intervals.push((a, b)),
            }
        }
        IntervalSet { intervals }
    }

    pub fn union(&self, other: &IntervalSet) -> IntervalSet {
        IntervalSet::from_intervals(self.intervals.iter().chain(&other.intervals).copied().collect())
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    /// Every interval of `self` lies inside one interval of `other`.
    pub fn is_subset_of(&self, other: &IntervalSet) -> bool {
        self.intervals
            .iter()
            .all(|(a, b)| other.intervals.iter().any(|(c, d)| c <= a && b <= d))
    }

    /// Number of half-open boxes `[i b^{-g}, (i+1) b^{-g})` (the last one closed) hit by the set.
    pub fn boxes_hit(&self, base: u32, g: u32) -> Result<u64> {
        let count = checked_pow(base, g)?;
        let scale = count as f64;
        let mut total = 0u64;
        let mut last: Option<u64> = None;
        for (a, b) in &self.intervals {
            let first = ((a * scale).floor() as u64).min(count - 1);
            let end = ((b * scale).floor() as u64).min(count - 1);
            let start = match last {
                Some(l) if l >= first => l + 1,
                _ => first,
            };
            if end >= start {
                total += end - start + 1;
            }
            last = Some(last.map_or(end, |l| l.max(end)));
        }
        Ok(total)
    }
}

/// Qualifying `λ^ξ`-balls of one level of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverLevel {
    pub k: u32,
    /// Radius `λ^ξ` of the balls at this level (the largest if several).
    pub radius: f64,
    pub candidates: usize,
    pub qualifying: usize,
    pub set: IntervalSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverEstimate {
    pub base: u32,
    pub xi: f64,
    pub alpha: f64,
    pub eps_sequence: Option<EpsSequence>,
    pub iteration: u32,
    pub levels: Vec<CoverLevel>,
    /// Some ball mass was evaluated with partial boundary boxes.
    pub over_approximated: bool,
    pub diagnostic: Option<String>,
}

impl CoverEstimate {
    /// A fixed set, treated as a single level at every scale.
    pub fn explicit(base: u32, intervals: Vec<(f64, f64)>) -> Self {
        let set = IntervalSet::from_intervals(intervals);
        CoverEstimate {
            base,
            xi: 1.0,
            alpha: f64::NAN,
            eps_sequence: None,
            iteration: 0,
            levels: vec![CoverLevel { k: 0, radius: 0.0, candidates: set.intervals.len(), qualifying: set.intervals.len(), set }],
            over_approximated: false,
            diagnostic: None,
        }
    }

    /// `∪_{k >= N} (qualifying balls at level k)`; decreasing in `N`.
    pub fn iteration_set(&self, n: u32) -> IntervalSet {
        let raw = self
            .levels
            .iter()
            .filter(|l| l.k >= n)
            .flat_map(|l| l.set.intervals.iter().copied())
            .collect();
        IntervalSet::from_intervals(raw)
    }

    /// The finite-horizon estimate `∩_{N <= iteration} ∪_{k >= N} …`.
    pub fn set(&self) -> IntervalSet {
        self.iteration_set(self.iteration)
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.k < self.iteration || l.set.is_empty())
    }
}

/// `μ([lo, hi] ∩ [0, 1])` from depth-`D` boxes meeting the interval in
/// positive length; the flag is raised when an endpoint is off the grid.
fn ball_mass(prefix: &[f64], base: u32, depth: u32, lo: f64, hi: f64) -> (f64, bool) {
    let count = (base as f64).powi(depth as i32);
    let (lo, hi) = (lo.max(0.0) * count, hi.min(1.0) * count);
    let first = lo.floor() as usize;
    let end = (hi.ceil() as usize).min(prefix.len() - 1).max(first);
    let partial = lo.fract() != 0.0 || hi.fract() != 0.0;
    (prefix[end] - prefix[first], partial)
}

/// Finite-horizon `K(α, ξ)`: at each level `k >= iteration` keep the balls
/// with `λ^{α+ε_k} <= μ(B(x, λ)) <= λ^{α-ε_k}` and record `B(x, λ^ξ) ∩ [0, 1]`.
pub fn limsup_cover(
    system: &PointSystem,
    field: &MassField,
    alpha: f64,
    xi: f64,
    eps: &EpsSequence,
    iteration: u32,
) -> Result<CoverEstimate> {
    if field.base() != system.base() {
        return Err(Error::Domain("system and field use different bases".into()));
    }
    if !(xi >= 1.0) {
        return Err(Error::Domain(format!("ξ = {xi} must be at least 1")));
    }
    eps.validate()?;
    let depth = field.depth();
    let masses = field.masses(depth);
    let mut prefix = Vec::with_capacity(masses.len() + 1);
    prefix.push(0.0);
    for m in &masses {
        prefix.push(prefix.last().unwrap() + m);
    }
    let top = system.max_level().unwrap_or(0).min(depth);
    let levels: Vec<(CoverLevel, bool)> = (iteration.max(1)..=top)
        .into_par_iter()
        .map(|k| {
            let e = eps.at(k);
            let mut partial_any = false;
            let mut raw = Vec::new();
            let mut candidates = 0;
            let mut radius: f64 = 0.0;
            for it in system.level(k) {
                candidates += 1;
                let (m, partial) = ball_mass(&prefix, field.base(), depth, it.x - it.lambda, it.x + it.lambda);
                partial_any |= partial;
                let (lo, hi) = (it.lambda.powf(alpha + e), it.lambda.powf(alpha - e));
                if m >= lo * (1.0 - 1e-12) && m <= hi * (1.0 + 1e-12) {
                    let r = it.lambda.powf(xi);
                    radius = radius.max(r);
                    raw.push(((it.x - r).max(0.0), (it.x + r).min(1.0)));
                }
            }
            let qualifying = raw.len();
            (CoverLevel { k, radius, candidates, qualifying, set: IntervalSet::from_intervals(raw) }, partial_any)
        })
        .collect();
    let over_approximated = levels.iter().any(|(_, p)| *p);
    let levels: Vec<CoverLevel> = levels.into_iter().map(|(l, _)| l).collect();
    let empty: Vec<u32> = levels.iter().filter(|l| l.qualifying == 0).map(|l| l.k).collect();
    let diagnostic = if levels.is_empty() {
        Some("no system level between the iteration and the field depth".into())
    } else if !empty.is_empty() {
        Some(format!("no qualifying balls at levels {empty:?}"))
    } else {
        None
    };
    Ok(CoverEstimate {
        base: system.base(),
        xi,
        alpha,
        eps_sequence: Some(eps.clone()),
        iteration,
        levels,
        over_approximated,
        diagnostic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub dimension: f64,
    pub r_squared: f64,
    pub grid_levels: Vec<u32>,
    /// Cover level used at each grid level.
    pub cover_levels: Vec<u32>,
    pub counts: Vec<u64>,
}

/// Least-squares slope of `log N_g` against `g log b` over the grid levels
/// `grid_depth - 5 ..= grid_depth`. At grid level `g` the count uses the
/// deepest cover level whose balls have radius `>= b^{-g}`, or the deepest
/// level when none does.
pub fn box_dimension(cover: &CoverEstimate, grid_depth: u32) -> Result<DimensionEstimate> {
    let levels: Vec<&CoverLevel> = cover
        .levels
        .iter()
        .filter(|l| l.k >= cover.iteration && !l.set.is_empty())
        .collect();
    if levels.is_empty() {
        return Err(Error::DegenerateRegression(format!(
            "empty cover{}",
            cover.diagnostic.as_ref().map(|d| format!(": {d}")).unwrap_or_default()
        )));
    }
    let b = cover.base as f64;
    let mut out = DimensionEstimate { dimension: f64::NAN, r_squared: f64::NAN, grid_levels: vec![], cover_levels: vec![], counts: vec![] };
    for g in grid_depth.saturating_sub(5)..=grid_depth {
        let scale = b.powi(-(g as i32));
        let level = levels
            .iter()
            .filter(|l| l.radius >= scale * (1.0 - 1e-12))
            .max_by_key(|l| l.k)
            .or_else(|| levels.iter().max_by_key(|l| l.k))
            .expect("non-empty");
        let count = level.set.boxes_hit(cover.base, g)?;
        if count > 0 {
            out.grid_levels.push(g);
            out.cover_levels.push(level.k);
            out.counts.push(count);
        }
    }
    let xs: Vec<f64> = out.grid_levels.iter().map(|&g| g as f64 * b.ln()).collect();
    let ys: Vec<f64> = out.counts.iter().map(|&c| (c as f64).ln()).collect();
    let (slope, r2) = least_squares(&xs, &ys)?;
    out.dimension = slope;
    out.r_squared = r2;
    Ok(out)
}

/// Slope and R² of the least-squares line; R² is 1 for an exact fit.
fn least_squares(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 3 {
        return Err(Error::DegenerateRegression(format!("{} points", xs.len())));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateRegression("constant abscissa".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, r2))
}

/// Settings of [`conditioned_ubiquity_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbiquityParams {
    pub neighbor_radius: u64,
    pub eps: EpsSequence,
    /// `κ` of `S_j = ⌊j (log j)^{-κ}⌋`.
    pub kappa: f64,
    /// Exponent of `ρ_j = (log j)^{exponent}`.
    pub rho_exponent: f64,
    /// Horizon of the growth speed computed on each copy `μ_q^u`.
    pub copy_depth: u32,
    pub tail_depth: u32,
    pub fraction: f64,
}

impl Default for UbiquityParams {
    fn default() -> Self {
        UbiquityParams {
            neighbor_radius: 1,
            eps: EpsSequence::RootLog { eta: 0.5 },
            kappa: 1.0,
            rho_exponent: 2.0,
            copy_depth: 10,
            tail_depth: 4,
            fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbiquitySample {
    pub key: u64,
    pub t: f64,
    pub passed: bool,
    /// Level `k` of the first success.
    pub level: Option<u32>,
    pub checked_levels: u32,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbiquityReport {
    pub q: f64,
    pub xi: f64,
    pub horizon: u32,
    pub fraction: f64,
    pub samples: Vec<UbiquitySample>,
    /// Empirical `min |u| / (ξ k)` and `max |u| / (ξ k)` over all checks.
    pub ratio_range: (f64, f64),
}

/// Samples `M` points from `μ_q`; a point passes when some level `k` in the
/// upper half of `[1, horizon]` with `B_{k,1/2}(t) ≠ ∅` gives
/// `u = u(w^{(k+3)}(t))` with `GS(μ_q^u, μ_q^u, qτ̃'(q) - τ̃(q)) <= S_{|u|}`
/// and `‖μ_q^u‖ >= b^{-ρ_{|u|}}`.
pub fn conditioned_ubiquity_check(
    tree: &CascadeTree,
    q: f64,
    xi: f64,
    samples: usize,
    horizon: u32,
    system: &PointSystem,
    params: &UbiquityParams,
) -> Result<UbiquityReport> {
    if samples == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    if !(xi > 1.0) {
        return Err(Error::Domain(format!("ξ = {xi} must exceed 1")));
    }
    let j = tree.j_interval()?;
    if !j.contains(q) {
        return Err(Error::OutsideJ { q, lo: j.lo, hi: j.hi });
    }
    params.eps.validate()?;
    let s_seq = SjSequence::JLogDown { kappa: params.kappa };
    s_seq.validate()?;
    let rho = RhoSequence::new(params.rho_exponent)?;
    let alpha = tree.model().legendre_at_tangency(q);
    let b = tree.base();
    let point_depth = ((xi * (horizon + 3) as f64).ceil() as u32).max(horizon + 3) + 2;
    let from = horizon.div_ceil(2).max(1);

    let results: Vec<Result<(UbiquitySample, f64, f64)>> = (0..samples as u64)
        .into_par_iter()
        .map(|key| {
            let leaf = tree.tilted_point(q, point_depth, params.tail_depth, key)?;
            let (a, c) = leaf.interval();
            let t = 0.5 * (a + c);
            let mut sample = UbiquitySample {
                key,
                t,
                passed: false,
                level: None,
                checked_levels: 0,
                min_ratio: f64::INFINITY,
                max_ratio: f64::NEG_INFINITY,
            };
            for k in from..=horizon {
                if balls_at(t, k, 0.5, system)?.is_empty() {
                    continue;
                }
                sample.checked_levels += 1;
                let w = Word::containing(b, k + 3, t)?;
                let sel = select_target(&w, xi, system)?;
                sample.min_ratio = sample.min_ratio.min(sel.ratio);
                sample.max_ratio = sample.max_ratio.max(sel.ratio);
                if sample.passed {
                    continue;
                }
                let ulen = sel.u.len();
                let field = tree.copy_field(&sel.u, params.copy_depth, Some(q), Construction::Nondegenerate, params.tail_depth)?;
                let mass_ok = field.total_mass() >= (b as f64).powf(-rho.at(ulen));
                if !mass_ok {
                    continue;
                }
                let gs = growth_speed(&field, &field, alpha, params.neighbor_radius, &params.eps, params.fraction, params.copy_depth)?;
                if gs.is_some_and(|p| p as u64 <= s_seq.at(ulen)) {
                    sample.passed = true;
                    sample.level = Some(k);
                }
            }
            let (lo, hi) = (sample.min_ratio, sample.max_ratio);
            Ok((sample, lo, hi))
        })
        .collect();
    let mut out = Vec::with_capacity(samples);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in results {
        let (s, a, c) = r?;
        lo = lo.min(a);
        hi = hi.max(c);
        out.push(s);
    }
    let fraction = out.iter().filter(|s| s.passed).count() as f64 / samples as f64;
    Ok(UbiquityReport { q, xi, horizon, fraction, samples: out, ratio_range: (lo, hi) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::WeightModel;
    use std::sync::Arc;

    fn lebesgue(n: u32) -> MassField {
        MassField::from_leaf_masses(2, vec![2f64.powi(-(n as i32)); 1 << n]).unwrap()
    }

    #[test]
    fn badic_counts() {
        assert_eq!(PointSystem::badic(2, 1).unwrap().len(), 3);
        assert_eq!(PointSystem::badic(2, 2).unwrap().len(), 8);
        let s = PointSystem::badic(3, 2).unwrap();
        assert_eq!(s.level(2).count(), 10);
        assert!(s.items().iter().all(|it| it.level >= 1 && it.level <= 2));
    }

    #[test]
    fn levels_at_exact_powers() {
        assert_eq!(level_of(2, 0.5), 1);
        assert_eq!(level_of(2, 0.3), 1);
        assert_eq!(level_of(2, 0.25), 2);
        assert_eq!(level_of(2, 1.0), 0);
        assert_eq!(level_of(10, 1e-3), 3);
    }

    #[test]
    fn covering_on_dyadic_grid() {
        let s = PointSystem::badic(2, 12).unwrap();
        assert_eq!(s.covering_fraction(10, 0.25, 12).unwrap(), 1.0);
    }

    #[test]
    fn balls_at_examples() {
        let s = PointSystem::badic(2, 4).unwrap();
        let found = balls_at(0.0, 1, 0.5, &s).unwrap();
        assert!(found.iter().any(|it| it.x == 0.0 && it.lambda == 0.5));
        // Oracle: items at level 3 are x = i/8 with λ = 1/8, kept iff |1/3 - x| <= 1/32.
        let hits = balls_at(1.0 / 3.0, 3, 0.25, &s).unwrap();
        let expected: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).filter(|x| (1.0 / 3.0 - x).abs() <= 1.0 / 32.0).collect();
        assert_eq!(hits.iter().map(|it| it.x).collect::<Vec<_>>(), expected);
        let empty = PointSystem::custom(2, vec![]).unwrap();
        assert!(balls_at(0.3, 2, 0.5, &empty).unwrap().is_empty());
        assert!(balls_at(0.3, 2, 0.0, &s).is_err());
    }

    #[test]
    fn select_target_fallback() {
        let empty = PointSystem::custom(2, vec![]).unwrap();
        let w = Word::from_digits(2, &[1, 0, 1, 1]).unwrap();
        let sel = select_target(&w, 2.0, &empty).unwrap();
        assert_eq!(sel.u.digits(), vec![1, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(sel.n, None);
    }

    #[test]
    fn select_target_centered_ball() {
        // Single item x = 1/2, λ = 1/4 (level 2); w of length 5 with I_w touching 1/2.
        let s = PointSystem::custom(2, vec![(0.5, 0.25)]).unwrap();
        let w = Word::from_digits(2, &[1, 0, 0, 0, 0]).unwrap();
        let sel = select_target(&w, 2.0, &s).unwrap();
        assert_eq!(sel.n, Some(1));
        assert_eq!(sel.u.len(), 4);
        assert_eq!(sel.u.interval(), (7.0 / 16.0, 0.5));
        assert_eq!(select_target(&w, 2.0, &s).unwrap(), sel);
    }

    #[test]
    fn select_target_prefers_leftmost_centre() {
        let s = PointSystem::badic(2, 6).unwrap();
        let w = Word::from_digits(2, &[0, 1, 1, 0, 0, 0, 0]).unwrap();
        let sel = select_target(&w, 1.5, &s).unwrap();
        let item = &s.items()[sel.n.unwrap() - 1];
        let (a, c) = w.interval();
        let candidates: Vec<f64> = s
            .level(4)
            .filter(|it| (it.x - c).max(a - it.x).max(0.0) <= it.lambda / 4.0)
            .map(|it| it.x)
            .collect();
        assert_eq!(item.x, candidates.iter().cloned().fold(f64::INFINITY, f64::min));
        let (u0, u1) = sel.u.interval();
        let r = item.lambda.powf(1.5);
        assert!(u0 >= item.x - r && u1 <= item.x + r);
    }

    #[test]
    fn target_length_tends_to_word_length() {
        let s = PointSystem::badic(2, 14).unwrap();
        let w = Word::containing(2, 17, 0.3).unwrap();
        let ratio = |xi: f64| select_target(&w, xi, &s).unwrap().u.len() as f64 / w.len() as f64;
        assert!(ratio(1.01) < ratio(2.0));
        assert!(ratio(1.01) <= 1.2);
    }

    #[test]
    fn maximal_interval_oracle() {
        assert_eq!(maximal_badic_inside(2, 7.0 / 16.0, 9.0 / 16.0).unwrap().interval(), (7.0 / 16.0, 0.5));
        assert_eq!(maximal_badic_inside(2, -1.0, 2.0).unwrap(), Word::empty(2));
        assert_eq!(maximal_badic_inside(2, 0.2, 0.8).unwrap().interval(), (0.25, 0.5));
    }

    #[test]
    fn interval_set_operations() {
        let s = IntervalSet::from_intervals(vec![(0.5, 0.6), (0.1, 0.2), (0.15, 0.3)]);
        assert_eq!(s.intervals, vec![(0.1, 0.3), (0.5, 0.6)]);
        assert!(IntervalSet::from_intervals(vec![(0.12, 0.2)]).is_subset_of(&s));
        assert_eq!(IntervalSet::from_intervals(vec![(0.0, 1.0)]).boxes_hit(2, 4).unwrap(), 16);
        assert_eq!(IntervalSet::from_intervals(vec![(0.3, 0.3)]).boxes_hit(2, 4).unwrap(), 1);
    }

    #[test]
    fn lebesgue_covers() {
        let f = lebesgue(12);
        let s = PointSystem::badic(2, 12).unwrap();
        let eps = EpsSequence::RootLog { eta: 0.5 };
        let full = limsup_cover(&s, &f, 1.0, 1.0, &eps, 4).unwrap();
        assert!((full.set().length() - 1.0).abs() < 1e-12);
        let none = limsup_cover(&s, &f, 2.0, 1.0, &eps, 4).unwrap();
        assert!(none.is_empty());
        assert!(none.diagnostic.is_some());
        assert!(box_dimension(&none, 12).is_err());
    }

    #[test]
    fn cover_iterations_are_nested() {
        let tree = CascadeTree::new(Arc::new(WeightModel::deterministic(2, vec![0.25, 0.75]).unwrap()), 0);
        let f = tree.leaf_masses(12, None, Construction::Nondegenerate, 0).unwrap();
        let s = PointSystem::badic(2, 12).unwrap();
        let alpha = tree.model().tau_tilde_prime(1.0).value;
        let cover = limsup_cover(&s, &f, alpha, 2.0, &EpsSequence::RootLog { eta: 0.5 }, 1).unwrap();
        assert!(!cover.set().is_empty());
        for n in 1..12 {
            assert!(cover.iteration_set(n + 1).is_subset_of(&cover.iteration_set(n)));
        }
    }

    #[test]
    fn dimension_of_simple_sets() {
        let unit = CoverEstimate::explicit(2, vec![(0.0, 1.0)]);
        assert!((box_dimension(&unit, 12).unwrap().dimension - 1.0).abs() < 0.02);
        let point = CoverEstimate::explicit(2, vec![(0.3, 0.3)]);
        assert!(box_dimension(&point, 12).unwrap().dimension.abs() < 0.05);
    }

    #[test]
    fn lebesgue_ubiquity_dimension() {
        let f = lebesgue(14);
        let s = PointSystem::badic(2, 14).unwrap();
        let eps = EpsSequence::RootLog { eta: 0.5 };
        for xi in [1.0, 2.0] {
            let cover = limsup_cover(&s, &f, 1.0, xi, &eps, 1).unwrap();
            let d = box_dimension(&cover, 14).unwrap();
            assert!((d.dimension - 1.0 / xi).abs() < 0.15, "xi={xi}: {d:?}");
        }
    }

    #[test]
    fn ubiquity_check_lebesgue_q_zero() {
        let tree = CascadeTree::new(Arc::new(WeightModel::lebesgue(2).unwrap()), 3);
        let s = PointSystem::badic(2, 8).unwrap();
        let report = conditioned_ubiquity_check(&tree, 0.0, 1.5, 20, 8, &s, &UbiquityParams::default()).unwrap();
        assert_eq!(report.fraction, 1.0);
        assert!(conditioned_ubiquity_check(&tree, 0.0, 1.5, 0, 8, &s, &UbiquityParams::default()).is_err());
    }
}
