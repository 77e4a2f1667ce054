//! One realization of an independent random cascade.
//!
//! The weight vector `W(w)` at node `w` is a pure function of
//! `(seed, w)`, so the subtree below `v` *is* the copy `μ^v`: no resampling
//! happens when a copy is analyzed, and `μ(I_{vw}) = μ^v(I_w) Π_k W_{v_{k+1}}(v|k)`
//! holds literally.
//!
//! Masses are truncations. With tail depth `d`, the mass of `I_w` is the
//! product of weights down to `w` times `Ŷ(w, d)`, the total mass of the
//! depth-`d` truncation of the copy `μ^w`; `d = 0` gives `Ŷ ≡ 1`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MassField;
use crate::rng::{keyed_rng, level_rng, Purpose};
use crate::weights::{log_sum_exp, Interval, WeightModel};
use crate::word::{checked_pow, Word};

/// Default cap on the number of nodes materialized at the deepest level.
pub const DEFAULT_NODE_BUDGET: u64 = 1 << 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    /// Products of weights (the martingale limit when τ̃'(1⁻) > 0).
    Nondegenerate,
    /// `-Σ P log P` truncations (the τ̃'(1⁻) = 0 construction).
    Critical,
}

/// Truncation `T_d(w) = -Σ_{u ∈ A^d} P(wu) ln P(wu)` of the critical-case mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalMass {
    pub value: f64,
    /// `T_{d-1}(w)`, absent when `d = 0`.
    pub previous: Option<f64>,
    /// `|T_d - T_{d-1}|` (NaN when `d = 0`).
    pub gap: f64,
    /// The truncation is not positive: a finite-depth artifact.
    pub nonpositive: bool,
}

#[derive(Debug)]
pub struct CascadeTree {
    model: Arc<WeightModel>,
    seed: u64,
    node_budget: u64,
    cache: RwLock<HashMap<Word, Arc<[f64]>>>,
    j: OnceLock<std::result::Result<Interval, Error>>,
    tau_cache: Mutex<HashMap<u64, f64>>,
}

/// Per-realization tilt applied to every node's log-weights: `ln W ↦ shift + q ln W`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tilt {
    q: f64,
    shift: f64,
}

impl Tilt {
    const IDENTITY: Tilt = Tilt { q: 1.0, shift: 0.0 };

    #[inline]
    fn apply(&self, ln_w: f64) -> f64 {
        if *self == Tilt::IDENTITY {
            ln_w
        } else {
            self.shift + self.q * ln_w
        }
    }
}

impl CascadeTree {
    pub fn new(model: Arc<WeightModel>, seed: u64) -> Self {
        CascadeTree {
            model,
            seed,
            node_budget: DEFAULT_NODE_BUDGET,
            cache: RwLock::new(HashMap::new()),
            j: OnceLock::new(),
            tau_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_node_budget(mut self, budget: u64) -> Self {
        self.node_budget = budget;
        self
    }

    pub fn model(&self) -> &WeightModel {
        &self.model
    }

    pub fn model_arc(&self) -> Arc<WeightModel> {
        self.model.clone()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self) -> u32 {
        self.model.base()
    }

    /// J of the underlying model, computed once.
    pub fn j_interval(&self) -> Result<Interval> {
        self.j.get_or_init(|| self.model.j_interval()).clone()
    }

    fn check_in_j(&self, q: f64) -> Result<()> {
        let j = self.j_interval()?;
        if j.contains(q) {
            Ok(())
        } else {
            Err(Error::OutsideJ { q, lo: j.lo, hi: j.hi })
        }
    }

    /// τ̃(q), cached per q.
    pub fn tau(&self, q: f64) -> Result<f64> {
        if let Some(v) = self.tau_cache.lock().expect("tau cache").get(&q.to_bits()) {
            return Ok(*v);
        }
        let value = self.model.tau_tilde(q);
        if !value.is_finite() {
            return Err(Error::Domain(format!("τ̃({q}) diverges")));
        }
        self.tau_cache.lock().expect("tau cache").insert(q.to_bits(), value.value());
        Ok(value.value())
    }

    fn tilt(&self, q: Option<f64>) -> Result<Tilt> {
        match q {
            None => Ok(Tilt::IDENTITY),
            Some(q) => {
                self.check_in_j(q)?;
                Ok(Tilt { q, shift: self.tau(q)? * (self.base() as f64).ln() })
            }
        }
    }

    /// `W(w)`; cached, bit-identical across calls and across rebuilt trees.
    pub fn node_weights(&self, w: &Word) -> Arc<[f64]> {
        if let Some(hit) = self.cache.read().expect("weight cache").get(w) {
            return hit.clone();
        }
        let weights: Arc<[f64]> = self.model.sample_weights(self.seed, w).into();
        self.cache.write().expect("weight cache").insert(*w, weights.clone());
        weights
    }

    /// Materializes the cache for every word of length `<= depth`, after
    /// which concurrent readers never take the write lock.
    pub fn prefetch(&self, depth: u32) -> Result<()> {
        let b = self.base();
        let mut guard = self.cache.write().expect("weight cache");
        for len in 0..=depth {
            for index in 0..checked_pow(b, len)? {
                let w = Word::new(b, len, index)?;
                guard.entry(w).or_insert_with(|| self.model.sample_weights(self.seed, &w).into());
            }
        }
        Ok(())
    }

    fn ln_weights(&self, w: &Word, out: &mut [f64]) -> Result<()> {
        self.model.sample_ln_weights(self.seed, w, out);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteWeight { depth: w.len(), index: w.index() });
        }
        Ok(())
    }

    /// `ln Π_{k<|w|} W_{w_{k+1}}(root · w|k)`, the weight product along `w` inside the copy at `root`.
    fn ln_path_product(&self, root: &Word, w: &Word, tilt: Tilt) -> Result<f64> {
        let mut buf = vec![0.0; self.base() as usize];
        let mut acc = 0.0;
        for k in 0..w.len() {
            let node = root.concat(&w.prefix(k))?;
            self.ln_weights(&node, &mut buf)?;
            acc += tilt.apply(buf[w.digit(k) as usize]);
        }
        Ok(acc)
    }

    /// Log weight products at depth `depth` of the subtree rooted at `root`,
    /// one vector per tilt, ordered by index. Node draws are shared between tilts.
    fn subtree_products(&self, root: &Word, depth: u32, tilts: &[Tilt]) -> Result<Vec<Vec<f64>>> {
        let b = self.base();
        let leaves = checked_pow(b, depth)?;
        if leaves > self.node_budget {
            return Err(Error::Budget { needed: leaves as u128, budget: self.node_budget as u128 });
        }
        root.concat(&Word::new(b, depth, 0)?)?;
        let bu = b as usize;
        let mut levels: Vec<Vec<f64>> = tilts.iter().map(|_| vec![0.0]).collect();
        let mut buf = vec![0.0; bu];
        for j in 0..depth {
            let global_depth = root.len() + j;
            let base_rng = level_rng(self.seed, Purpose::NodeWeights, global_depth);
            let width = checked_pow(b, j)? as usize;
            let offset = root.index() * width as u64;
            let mut next: Vec<Vec<f64>> = tilts.iter().map(|_| vec![0.0; width * bu]).collect();
            for i in 0..width {
                let mut rng = base_rng.clone();
                rng.set_stream(offset + i as u64);
                self.model.draw_ln(&mut rng, &mut buf);
                if buf.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteWeight { depth: global_depth, index: offset + i as u64 });
                }
                for (t, tilt) in tilts.iter().enumerate() {
                    let parent = levels[t][i];
                    let row = &mut next[t][i * bu..(i + 1) * bu];
                    for (c, slot) in row.iter_mut().enumerate() {
                        *slot = parent + tilt.apply(buf[c]);
                    }
                }
            }
            levels = next;
        }
        Ok(levels)
    }

    /// `ln Ŷ(w, d)` for the (tilted) weights.
    fn ln_tail(&self, w: &Word, d: u32, tilt: Tilt) -> Result<f64> {
        if d == 0 {
            return Ok(0.0);
        }
        let leaves = self.subtree_products(w, d, &[tilt])?;
        Ok(log_sum_exp(&leaves[0]))
    }

    /// Natural log of `μ(I_w)` at tail depth `d`.
    pub fn ln_mass(&self, w: &Word, tail_depth: u32) -> Result<f64> {
        self.ln_mass_in_copy(&Word::empty(self.base()), w, tail_depth)
    }

    /// `μ(I_w) = Π_{k<|w|} W_{w_{k+1}}(w|k) · Ŷ(w, d)`.
    pub fn mass(&self, w: &Word, tail_depth: u32) -> Result<f64> {
        Ok(self.ln_mass(w, tail_depth)?.exp())
    }

    /// Natural log of `μ^root(I_w)` at tail depth `d`.
    pub fn ln_mass_in_copy(&self, root: &Word, w: &Word, tail_depth: u32) -> Result<f64> {
        let path = self.ln_path_product(root, w, Tilt::IDENTITY)?;
        Ok(path + self.ln_tail(&root.concat(w)?, tail_depth, Tilt::IDENTITY)?)
    }

    /// `μ^root(I_w)`, the mass of `I_w` under the copy rooted at `root`.
    pub fn mass_in_copy(&self, root: &Word, w: &Word, tail_depth: u32) -> Result<f64> {
        Ok(self.ln_mass_in_copy(root, w, tail_depth)?.exp())
    }

    /// `μ_q(I_w)`: the same realization with weights `b^{τ̃(q)} W^q`.
    pub fn mass_q(&self, q: f64, w: &Word, tail_depth: u32) -> Result<f64> {
        let tilt = self.tilt(Some(q))?;
        let root = Word::empty(self.base());
        let path = self.ln_path_product(&root, w, tilt)?;
        Ok((path + self.ln_tail(w, tail_depth, tilt)?).exp())
    }

    /// `Ŷ_q(w)`: total mass of the depth-`d` truncation of `μ_q^w`.
    pub fn total_mass_q(&self, q: f64, w: &Word, depth: u32) -> Result<f64> {
        let tilt = self.tilt(Some(q))?;
        Ok(self.ln_tail(w, depth, tilt)?.exp())
    }

    /// `T_d(w) = -Σ_{u ∈ A^d} P(wu) ln P(wu)` with `P` the weight product from the root.
    pub fn critical_mass(&self, w: &Word, tail_depth: u32) -> Result<CriticalMass> {
        let root = Word::empty(self.base());
        let ln_p_w = self.ln_path_product(&root, w, Tilt::IDENTITY)?;
        let truncation = |d: u32| -> Result<f64> {
            let leaves = self.subtree_products(w, d, &[Tilt::IDENTITY])?;
            Ok(leaves[0].iter().map(|&lp| {
                let ln_p = ln_p_w + lp;
                -ln_p.exp() * ln_p
            }).sum())
        };
        let value = truncation(tail_depth)?;
        let previous = if tail_depth > 0 { Some(truncation(tail_depth - 1)?) } else { None };
        Ok(CriticalMass {
            value,
            previous,
            gap: previous.map_or(f64::NAN, |p| (value - p).abs()),
            nonpositive: value <= 0.0,
        })
    }

    /// All masses of `μ` (or `μ_q`) at depths `0..=n`.
    pub fn leaf_masses(&self, n: u32, q: Option<f64>, mode: Construction, tail_depth: u32) -> Result<MassField> {
        self.copy_field(&Word::empty(self.base()), n, q, mode, tail_depth)
    }

    /// All masses of the copy `μ^root` (or `μ_q^root`) at depths `0..=n`.
    pub fn copy_field(&self, root: &Word, n: u32, q: Option<f64>, mode: Construction, tail_depth: u32) -> Result<MassField> {
        Ok(self.copy_fields(root, n, &[q], mode, tail_depth)?.pop().expect("one field"))
    }

    /// Several fields of the same copy that differ only in the tilt `q`,
    /// sharing one pass over the node weights.
    ///
    /// The masses come from the truncation at depth `D = n + tail_depth`:
    /// depth-`n` masses equal `mass(w, tail_depth)` and coarser depths are
    /// exact sums of their children.
    pub fn copy_fields(
        &self,
        root: &Word,
        n: u32,
        qs: &[Option<f64>],
        mode: Construction,
        tail_depth: u32,
    ) -> Result<Vec<MassField>> {
        let tilts: Vec<Tilt> = qs.iter().map(|q| self.tilt(*q)).collect::<Result<_>>()?;
        let deepest = n + tail_depth;
        let products = self.subtree_products(root, deepest, &tilts)?;
        let b = self.base();
        let spec = self.model.spec();
        let label = self.model.label();
        products
            .into_iter()
            .zip(qs)
            .map(|(leaf_logs, q)| {
                let meta = crate::field::FieldMeta {
                    base: b,
                    seed: self.seed,
                    model: label.clone(),
                    model_spec: spec.clone(),
                    root: root.digits(),
                    q: *q,
                    depth: n,
                    tail_depth,
                    mode,
                };
                match mode {
                    Construction::Nondegenerate => MassField::from_deep_ln_masses(meta, leaf_logs),
                    Construction::Critical => {
                        let values = leaf_logs.iter().map(|&lp| -lp.exp() * lp).collect();
                        MassField::from_deep_linear_masses(meta, values)
                    }
                }
            })
            .collect()
    }

    /// Leaf of depth `n` drawn with probability proportional to its
    /// `μ_q` mass in the depth-`(n + tail_depth)` truncation. Each step picks
    /// a child with probability `mass_q(wi) / Σ_j mass_q(wj)` with all masses
    /// taken from the same truncation, so the leaf law is exact.
    pub fn sample_point(&self, q: f64, n: u32, tail_depth: u32, key: u64) -> Result<Word> {
        let field = self.leaf_masses(n, Some(q), Construction::Nondegenerate, tail_depth)?;
        Ok(field.sample_leaf(self.seed, key))
    }

    /// Deep approximate `μ_q`-distributed point: at every node the child
    /// `i` is chosen with probability proportional to `W_{q,i}(w) Ŷ_q(wi, tail_depth)`.
    /// This is the size-biased descent with the limit `Y_q(wi)` replaced by a
    /// fixed-depth truncation; it reaches depths where a full field cannot
    /// be materialized.
    pub fn tilted_point(&self, q: f64, n: u32, tail_depth: u32, key: u64) -> Result<Word> {
        let tilt = self.tilt(Some(q))?;
        let b = self.base();
        let mut rng = keyed_rng(self.seed, Purpose::PointSampling, n + (1 << 16), key);
        let mut w = Word::empty(b);
        let mut buf = vec![0.0; b as usize];
        let mut logits = vec![0.0; b as usize];
        for _ in 0..n {
            self.ln_weights(&w, &mut buf)?;
            for i in 0..b {
                let child = w.child(i)?;
                logits[i as usize] = tilt.apply(buf[i as usize]) + self.ln_tail(&child, tail_depth, tilt)?;
            }
            let digit = sample_categorical(&logits, rng.random::<f64>());
            w = w.child(digit as u32)?;
        }
        Ok(w)
    }
}

/// Index drawn from unnormalized log-probabilities using the uniform `u ∈ [0, 1)`.
pub(crate) fn sample_categorical(logits: &[f64], u: f64) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = u * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}
