//! Finite words over the alphabet `{0, .., b-1}` and the b-adic intervals they encode.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A word `w` of length `|w|` over `{0, .., b-1}`, stored through its index
/// `i(w)` so that `I_w = [i(w) b^{-|w|}, (i(w)+1) b^{-|w|}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Word {
    base: u32,
    len: u32,
    index: u64,
}

/// Largest `n` with `b^n` representable as a `u64`.
pub fn max_len(base: u32) -> u32 {
    let mut n = 0;
    let mut acc: u64 = 1;
    while let Some(next) = acc.checked_mul(base as u64) {
        acc = next;
        n += 1;
    }
    n
}

/// `b^n` as a `u64`, or an error when it overflows.
pub fn checked_pow(base: u32, len: u32) -> Result<u64> {
    (base as u64)
        .checked_pow(len)
        .ok_or(Error::WordTooLong { base, len })
}

impl Word {
    pub fn empty(base: u32) -> Self {
        assert!(base >= 2, "base must be at least 2");
        Word { base, len: 0, index: 0 }
    }

    pub fn new(base: u32, len: u32, index: u64) -> Result<Self> {
        if base < 2 {
            return Err(Error::Domain(format!("base {base} < 2")));
        }
        let count = checked_pow(base, len)?;
        if index >= count {
            return Err(Error::Domain(format!(
                "index {index} out of range for words of length {len} over base {base}"
            )));
        }
        Ok(Word { base, len, index })
    }

    pub fn from_digits(base: u32, digits: &[u32]) -> Result<Self> {
        let mut w = Word::empty(base);
        for &d in digits {
            w = w.child(d)?;
        }
        Ok(w)
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Digits `w_1 .. w_{|w|}`, most significant first.
    pub fn digits(&self) -> Vec<u32> {
        let mut out = vec![0; self.len as usize];
        let mut i = self.index;
        for slot in out.iter_mut().rev() {
            *slot = (i % self.base as u64) as u32;
            i /= self.base as u64;
        }
        out
    }

    /// Digit `w_{k+1}` (0-based position `k`).
    pub fn digit(&self, k: u32) -> u32 {
        assert!(k < self.len);
        let shift = (self.base as u64).pow(self.len - 1 - k);
        ((self.index / shift) % self.base as u64) as u32
    }

    pub fn child(&self, digit: u32) -> Result<Word> {
        if digit >= self.base {
            return Err(Error::Domain(format!("digit {digit} >= base {}", self.base)));
        }
        let index = self
            .index
            .checked_mul(self.base as u64)
            .and_then(|i| i.checked_add(digit as u64))
            .ok_or(Error::WordTooLong { base: self.base, len: self.len + 1 })?;
        checked_pow(self.base, self.len + 1)?;
        Ok(Word { base: self.base, len: self.len + 1, index })
    }

    pub fn parent(&self) -> Option<Word> {
        (self.len > 0).then(|| Word {
            base: self.base,
            len: self.len - 1,
            index: self.index / self.base as u64,
        })
    }

    /// The truncation `w|k`.
    pub fn prefix(&self, k: u32) -> Word {
        assert!(k <= self.len);
        let drop = (self.base as u64).pow(self.len - k);
        Word { base: self.base, len: k, index: self.index / drop }
    }

    /// Concatenation `self · other`.
    pub fn concat(&self, other: &Word) -> Result<Word> {
        assert_eq!(self.base, other.base);
        let len = self.len + other.len;
        let scale = checked_pow(self.base, other.len)?;
        checked_pow(self.base, len)?;
        Ok(Word { base: self.base, len, index: self.index * scale + other.index })
    }

    /// `δ(v, w) = |i(v) - i(w)|`, defined only for words of equal length.
    pub fn delta(&self, other: &Word) -> Option<u64> {
        (self.len == other.len && self.base == other.base).then(|| self.index.abs_diff(other.index))
    }

    /// Closed interval `I_w`.
    pub fn interval(&self) -> (f64, f64) {
        let scale = (self.base as f64).powi(self.len as i32);
        (self.index as f64 / scale, (self.index + 1) as f64 / scale)
    }

    /// `w^{(n)}(t)`: the word of length `n` whose half-open interval contains `t`.
    /// `t = 1` is mapped to the last interval.
    pub fn containing(base: u32, len: u32, t: f64) -> Result<Word> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let count = checked_pow(base, len)?;
        let k = ((t * count as f64).floor() as u64).min(count - 1);
        Ok(Word { base, len, index: k })
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len == 0 {
            return write!(f, "∅");
        }
        let digits = self.digits();
        if self.base <= 10 {
            for d in digits {
                write!(f, "{d}")?;
            }
            Ok(())
        } else {
            let parts: Vec<String> = digits.iter().map(|d| d.to_string()).collect();
            write!(f, "{}", parts.join("."))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_and_index_agree() {
        let w = Word::from_digits(3, &[2, 0, 1]).unwrap();
        assert_eq!(w.index(), 2 * 9 + 1);
        assert_eq!(w.digits(), vec![2, 0, 1]);
        assert_eq!(w.digit(0), 2);
        assert_eq!(w.digit(2), 1);
        assert_eq!(w.to_string(), "201");
    }

    #[test]
    fn interval_reconstruction() {
        let w = Word::from_digits(2, &[1, 0]).unwrap();
        assert_eq!(w.interval(), (0.5, 0.75));
        assert_eq!(Word::empty(2).interval(), (0.0, 1.0));
    }

    #[test]
    fn prefix_parent_concat() {
        let v = Word::from_digits(2, &[1, 1]).unwrap();
        let w = Word::from_digits(2, &[0, 1, 0]).unwrap();
        let vw = v.concat(&w).unwrap();
        assert_eq!(vw.digits(), vec![1, 1, 0, 1, 0]);
        assert_eq!(vw.prefix(2), v);
        assert_eq!(vw.parent().unwrap().digits(), vec![1, 1, 0, 1]);
        assert!(Word::empty(2).parent().is_none());
    }

    #[test]
    fn delta_requires_equal_length() {
        let a = Word::new(2, 3, 1).unwrap();
        let b = Word::new(2, 3, 6).unwrap();
        assert_eq!(a.delta(&b), Some(5));
        assert_eq!(a.delta(&Word::new(2, 2, 1).unwrap()), None);
    }

    #[test]
    fn containing_point() {
        assert_eq!(Word::containing(2, 3, 0.3).unwrap().index(), 2);
        assert_eq!(Word::containing(2, 3, 1.0).unwrap().index(), 7);
        assert_eq!(Word::containing(2, 3, 0.25).unwrap().index(), 2);
    }

    #[test]
    fn overflow_is_reported() {
        assert_eq!(max_len(2), 63);
        assert!(Word::new(2, 64, 0).is_err());
        let deep = Word::new(2, 63, 0).unwrap();
        assert!(deep.child(0).is_err());
    }
}
