//! Simulation and multifractal analysis of independent random cascades on b-adic trees.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cascade;
pub mod error;
pub mod experiment;
pub mod field;
pub mod growthspeed;
pub mod output;
pub mod rng;
pub mod sequences;
pub mod ubiquity;
pub mod weights;
pub mod word;

pub use cascade::{CascadeTree, Construction, CriticalMass};
pub use error::{Error, Result};
pub use field::{FieldMeta, MassField};
pub use sequences::{EpsSequence, RhoSequence, SjSequence};
pub use weights::{Classification, Interval, ModelSpec, TauValue, WeightModel};
pub use word::Word;
