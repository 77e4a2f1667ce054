//! Materialized masses of one (copy of a) cascade at every depth `0..=n`.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{sample_categorical, Construction};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Purpose};
use crate::weights::{log_sum_exp, ModelSpec};
use crate::word::{checked_pow, Word};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub base: u32,
    pub seed: u64,
    pub model: String,
    pub model_spec: Option<ModelSpec>,
    /// Digits of the copy root `v` (empty for `μ` itself).
    pub root: Vec<u32>,
    /// Tilt exponent, `None` for the untilted measure.
    pub q: Option<f64>,
    pub depth: u32,
    pub tail_depth: u32,
    pub mode: Construction,
}

impl FieldMeta {
    /// Metadata for masses supplied directly rather than generated.
    pub fn explicit(base: u32, depth: u32) -> Self {
        FieldMeta {
            base,
            seed: 0,
            model: "explicit".into(),
            model_spec: None,
            root: Vec::new(),
            q: None,
            depth,
            tail_depth: 0,
            mode: Construction::Nondegenerate,
        }
    }
}

/// Natural-log masses `ln μ(I_w)` for all `|w| <= n`, indexed by `(|w|, i(w))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassField {
    meta: FieldMeta,
    levels: Vec<Vec<f64>>,
}

fn group_ln(level: &[f64], b: usize) -> Vec<f64> {
    level.chunks(b).map(log_sum_exp).collect()
}

fn group_linear(level: &[f64], b: usize) -> Vec<f64> {
    level.chunks(b).map(|c| c.iter().sum()).collect()
}

impl MassField {
    /// Field from log masses at depth `meta.depth + meta.tail_depth`.
    pub fn from_deep_ln_masses(meta: FieldMeta, deep: Vec<f64>) -> Result<Self> {
        let b = meta.base as usize;
        let expected = checked_pow(meta.base, meta.depth + meta.tail_depth)?;
        if deep.len() as u64 != expected {
            return Err(Error::Domain(format!("expected {expected} masses, got {}", deep.len())));
        }
        let mut current = deep;
        for _ in 0..meta.tail_depth {
            current = group_ln(&current, b);
        }
        let mut levels = vec![current];
        for _ in 0..meta.depth {
            let up = group_ln(levels.last().expect("level"), b);
            levels.push(up);
        }
        levels.reverse();
        Ok(MassField { meta, levels })
    }

    /// Field from linear (possibly signed) masses at depth
    /// `meta.depth + meta.tail_depth`. Any non-positive aggregate at depth
    /// `<= meta.depth` is rejected.
    pub fn from_deep_linear_masses(meta: FieldMeta, deep: Vec<f64>) -> Result<Self> {
        let b = meta.base as usize;
        let expected = checked_pow(meta.base, meta.depth + meta.tail_depth)?;
        if deep.len() as u64 != expected {
            return Err(Error::Domain(format!("expected {expected} masses, got {}", deep.len())));
        }
        let mut current = deep;
        for _ in 0..meta.tail_depth {
            current = group_linear(&current, b);
        }
        let mut linear = vec![current];
        for _ in 0..meta.depth {
            let up = group_linear(linear.last().expect("level"), b);
            linear.push(up);
        }
        linear.reverse();
        let count = linear.iter().flatten().filter(|v| !(**v > 0.0)).count();
        if count > 0 {
            return Err(Error::NonPositiveMass { count });
        }
        let levels = linear.into_iter().map(|l| l.into_iter().map(f64::ln).collect()).collect();
        Ok(MassField { meta, levels })
    }

    /// Field whose depth-`n` masses are given; coarser masses are their sums.
    pub fn from_leaf_masses(base: u32, masses: Vec<f64>) -> Result<Self> {
        if base < 2 {
            return Err(Error::Domain(format!("base {base} < 2")));
        }
        let mut depth = 0;
        let mut count = 1u64;
        while count < masses.len() as u64 {
            count *= base as u64;
            depth += 1;
        }
        if count != masses.len() as u64 {
            return Err(Error::Domain(format!("{} masses is not a power of {base}", masses.len())));
        }
        if let Some(bad) = masses.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return Err(Error::Domain(format!("mass {bad} is not a finite non-negative number")));
        }
        let logs = masses.into_iter().map(f64::ln).collect();
        MassField::from_deep_ln_masses(FieldMeta::explicit(base, depth), logs)
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn base(&self) -> u32 {
        self.meta.base
    }

    pub fn depth(&self) -> u32 {
        self.meta.depth
    }

    pub fn ln_level(&self, depth: u32) -> &[f64] {
        &self.levels[depth as usize]
    }

    pub fn ln_mass(&self, depth: u32, index: u64) -> f64 {
        self.levels[depth as usize][index as usize]
    }

    pub fn mass(&self, depth: u32, index: u64) -> f64 {
        self.ln_mass(depth, index).exp()
    }

    /// `log_b μ(I_w)`.
    pub fn log_b_mass(&self, depth: u32, index: u64) -> f64 {
        self.ln_mass(depth, index) / (self.base() as f64).ln()
    }

    pub fn word_mass(&self, w: &Word) -> f64 {
        self.mass(w.len(), w.index())
    }

    pub fn masses(&self, depth: u32) -> Vec<f64> {
        self.levels[depth as usize].iter().map(|l| l.exp()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.levels[0][0].exp()
    }

    /// Largest relative gap `|Σ_i μ(I_{wi}) - μ(I_w)| / μ(I_w)` over all parents.
    pub fn additivity_error(&self) -> f64 {
        let b = self.base() as usize;
        let mut worst: f64 = 0.0;
        for depth in 0..self.depth() as usize {
            for (i, parent) in self.levels[depth].iter().enumerate() {
                let p = parent.exp();
                if p == 0.0 {
                    continue;
                }
                let s: f64 = self.levels[depth + 1][i * b..(i + 1) * b].iter().map(|c| c.exp()).sum();
                worst = worst.max((s - p).abs() / p);
            }
        }
        worst
    }

    /// Leaf drawn from the field's own law by descending with child
    /// probabilities proportional to child masses.
    pub fn sample_leaf(&self, seed: u64, key: u64) -> Word {
        let mut rng = keyed_rng(seed, Purpose::PointSampling, self.depth(), key);
        let b = self.base() as usize;
        let mut w = Word::empty(self.base());
        for depth in 1..=self.depth() as usize {
            let start = w.index() as usize * b;
            let digit = sample_categorical(&self.levels[depth][start..start + b], rng.random::<f64>());
            w = w.child(digit as u32).expect("field depth fits a word");
        }
        w
    }

    /// CSV layout: a `#`-prefixed JSON metadata line, a column header, then
    /// one `depth,index,log_b_mass` row per word, depth-major.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_string(&self.meta).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "# {header}")?;
        writeln!(out, "depth,index,log_b_mass")?;
        for depth in 0..=self.depth() {
            for index in 0..self.levels[depth as usize].len() as u64 {
                writeln!(out, "{depth},{index},{:.16e}", self.log_b_mass(depth, index))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::Io("empty field file".into()))??;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Io("missing metadata line".into()))?;
        let meta: FieldMeta = serde_json::from_str(json.trim()).map_err(|e| Error::Io(e.to_string()))?;
        lines.next().ok_or_else(|| Error::Io("missing column header".into()))??;
        let ln_b = (meta.base as f64).ln();
        let mut levels: Vec<Vec<f64>> = (0..=meta.depth)
            .map(|d| checked_pow(meta.base, d).map(|n| vec![f64::NAN; n as usize]))
            .collect::<Result<_>>()?;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = || parts.next().ok_or_else(|| Error::Io(format!("short row: {line}")));
            let depth: usize = field()?.trim().parse().map_err(|_| Error::Io(format!("bad depth: {line}")))?;
            let index: usize = field()?.trim().parse().map_err(|_| Error::Io(format!("bad index: {line}")))?;
            let value: f64 = field()?.trim().parse().map_err(|_| Error::Io(format!("bad mass: {line}")))?;
            let slot = levels
                .get_mut(depth)
                .and_then(|l| l.get_mut(index))
                .ok_or_else(|| Error::Io(format!("row out of range: {line}")))?;
            *slot = value * ln_b;
        }
        if levels.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Io("field file is missing rows".into()));
        }
        Ok(MassField { meta, levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_field_sums_upward() {
        let f = MassField::from_leaf_masses(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(f.depth(), 2);
        assert!((f.mass(1, 0) - 0.3).abs() < 1e-15);
        assert!((f.mass(1, 1) - 0.7).abs() < 1e-15);
        assert!((f.total_mass() - 1.0).abs() < 1e-15);
        assert!(f.additivity_error() < 1e-15);
    }

    #[test]
    fn rejects_bad_explicit_masses() {
        assert!(MassField::from_leaf_masses(2, vec![0.1, 0.2, 0.3]).is_err());
        assert!(MassField::from_leaf_masses(2, vec![0.1, -0.2]).is_err());
    }

    #[test]
    fn zero_mass_is_minus_infinity() {
        let f = MassField::from_leaf_masses(2, vec![0.0, 1.0]).unwrap();
        assert_eq!(f.log_b_mass(1, 0), f64::NEG_INFINITY);
        assert_eq!(f.total_mass(), 1.0);
    }

    #[test]
    fn linear_construction_flags_nonpositive() {
        let meta = FieldMeta { mode: Construction::Critical, ..FieldMeta::explicit(2, 1) };
        assert_eq!(
            MassField::from_deep_linear_masses(meta.clone(), vec![0.5, -0.1]),
            Err(Error::NonPositiveMass { count: 1 })
        );
        assert!(MassField::from_deep_linear_masses(meta, vec![0.5, 0.1]).is_ok());
    }

    #[test]
    fn tail_levels_are_folded() {
        let meta = FieldMeta { tail_depth: 2, ..FieldMeta::explicit(2, 1) };
        let deep: Vec<f64> = [0.1, 0.1, 0.1, 0.2, 0.1, 0.1, 0.1, 0.2].iter().map(|x: &f64| x.ln()).collect();
        let f = MassField::from_deep_ln_masses(meta, deep).unwrap();
        assert!((f.mass(1, 0) - 0.5).abs() < 1e-15);
        assert!((f.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let f = MassField::from_leaf_masses(3, (1..=9).map(|i| i as f64 / 45.0).collect()).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# {"));
        let g = MassField::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(g.meta(), f.meta());
        for d in 0..=2 {
            for i in 0..3u64.pow(d) {
                assert!((g.mass(d, i) - f.mass(d, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampled_leaf_follows_masses() {
        let f = MassField::from_leaf_masses(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut counts = [0usize; 4];
        for key in 0..10_000 {
            counts[f.sample_leaf(5, key).index() as usize] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let p = 0.1 * (i + 1) as f64;
            let sd = (10_000.0 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - 10_000.0 * p).abs() < 4.0 * sd);
        }
    }
}
