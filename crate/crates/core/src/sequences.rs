//! The sequences `ε_n`, `S_j` and `ρ_j` used by the level-set and growth-speed machinery.
//!
//! All logarithms are natural. Index 1 is evaluated as index 2 so that
//! `log 1 = 0` never enters a formula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn clamp_index(x: f64) -> f64 {
    if x < 2.0 { 2.0 } else { x }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EpsSequence {
    /// `ε_n = n^{-1/2} (log n)^{1/2 + η}`.
    RootLog { eta: f64 },
    /// `ε_n = (log n)^{-η}`.
    LogPower { eta: f64 },
    /// `ε_n = value` for every `n`.
    Constant { value: f64 },
    /// `ε_n = values[n - 1]`, the last value repeated beyond the list.
    Custom { values: Vec<f64> },
}

impl EpsSequence {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            EpsSequence::RootLog { eta } | EpsSequence::LogPower { eta } => eta.is_finite() && *eta > 0.0,
            EpsSequence::Constant { value } => value.is_finite() && *value >= 0.0,
            EpsSequence::Custom { values } => !values.is_empty() && values.iter().all(|v| v.is_finite() && *v >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ε sequence {self:?}")))
        }
    }

    /// `ε_n` at a real index.
    pub fn value(&self, x: f64) -> f64 {
        match self {
            EpsSequence::RootLog { eta } => {
                let x = clamp_index(x);
                x.powf(-0.5) * x.ln().powf(0.5 + eta)
            }
            EpsSequence::LogPower { eta } => clamp_index(x).ln().powf(-eta),
            EpsSequence::Constant { value } => *value,
            EpsSequence::Custom { values } => {
                let i = (x.max(1.0).round() as usize).min(values.len());
                values[i - 1]
            }
        }
    }

    pub fn at(&self, n: u32) -> f64 {
        self.value(n as f64)
    }

    pub fn label(&self) -> String {
        match self {
            EpsSequence::RootLog { eta } => format!("root-log(eta={eta})"),
            EpsSequence::LogPower { eta } => format!("log-power(eta={eta})"),
            EpsSequence::Constant { value } => format!("constant({value})"),
            EpsSequence::Custom { values } => format!("custom({} values)", values.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SjSequence {
    /// `S_j = ⌊exp((j (log j)^η)^{1/(1+2η)})⌋`.
    ExpRoot { eta: f64 },
    /// `S_j = ⌊j (log j)^{η'}⌋` with `η' > 2η`.
    JLogUp { eta: f64, eta_prime: f64 },
    /// `S_j = ⌊j (log j)^{-κ}⌋`.
    JLogDown { kappa: f64 },
}

impl SjSequence {
    pub fn j_log_up(eta: f64, eta_prime: f64) -> Result<Self> {
        let s = SjSequence::JLogUp { eta, eta_prime };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SjSequence::ExpRoot { eta } if eta.is_finite() && *eta > 0.0 => Ok(()),
            SjSequence::JLogUp { eta, eta_prime } if eta.is_finite() && *eta > 0.0 && eta_prime.is_finite() => {
                if *eta_prime > 2.0 * eta {
                    Ok(())
                } else {
                    Err(Error::Config(format!("j-log-up needs η' > 2η, got η = {eta}, η' = {eta_prime}")))
                }
            }
            SjSequence::JLogDown { kappa } if kappa.is_finite() && *kappa >= 0.0 => Ok(()),
            other => Err(Error::Config(format!("invalid S_j sequence {other:?}"))),
        }
    }

    /// `S_j` at a real index, before the floor.
    pub fn raw(&self, x: f64) -> f64 {
        let x = clamp_index(x);
        let l = x.ln();
        match self {
            SjSequence::ExpRoot { eta } => (x * l.powf(*eta)).powf(1.0 / (1.0 + 2.0 * eta)).exp(),
            SjSequence::JLogUp { eta_prime, .. } => x * l.powf(*eta_prime),
            SjSequence::JLogDown { kappa } => x * l.powf(-kappa),
        }
    }

    pub fn value(&self, x: f64) -> u64 {
        self.raw(x).floor() as u64
    }

    pub fn at(&self, j: u32) -> u64 {
        self.value(j as f64)
    }

    /// Largest `j <= limit` with `S_j <= bound`, if any.
    pub fn last_index_within(&self, bound: u64, limit: u32) -> Option<u32> {
        (1..=limit).rev().find(|&j| self.at(j) <= bound)
    }

    pub fn label(&self) -> String {
        match self {
            SjSequence::ExpRoot { eta } => format!("exp-root(eta={eta})"),
            SjSequence::JLogUp { eta, eta_prime } => format!("j-log-up(eta={eta},eta'={eta_prime})"),
            SjSequence::JLogDown { kappa } => format!("j-log-down(kappa={kappa})"),
        }
    }
}

/// `ρ_j = (log j)^{exponent}`; the exponent is `1 + η` or `α` depending on the use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSequence {
    pub exponent: f64,
}

impl RhoSequence {
    pub fn new(exponent: f64) -> Result<Self> {
        if exponent.is_finite() && exponent > 0.0 {
            Ok(RhoSequence { exponent })
        } else {
            Err(Error::Config(format!("ρ exponent must be positive, got {exponent}")))
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        clamp_index(x).ln().powf(self.exponent)
    }

    pub fn at(&self, j: u32) -> f64 {
        self.value(j as f64)
    }
}
