//! Experiment configuration, orchestration over replicas, and CSV/JSON outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analysis::{box_count, ld_spectrum, model_legendre, partition_function, StructureFunction};
use crate::cascade::{CascadeTree, Construction, DEFAULT_NODE_BUDGET};
use crate::error::{Error, Result};
use crate::field::MassField;
use crate::growthspeed::{growth_speed, s_diagnostic};
use crate::output::{fmt_float, Table};
use crate::rng::replica_seed;
use crate::sequences::{EpsSequence, SjSequence};
use crate::ubiquity::{box_dimension, conditioned_ubiquity_check, limsup_cover, PointSystem, UbiquityParams};
use crate::weights::{ModelSpec, WeightModel};
use crate::word::Word;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Spectrum,
    Convergence,
    Growthspeed,
    Ldrenewal,
    Ubiquity,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Growthspeed => "growthspeed",
            ExperimentKind::Ldrenewal => "ldrenewal",
            ExperimentKind::Ubiquity => "ubiquity",
        }
    }
}

fn default_depth() -> u32 {
    12
}
fn default_replicas() -> u32 {
    1
}
fn default_qs() -> Vec<f64> {
    vec![-2.0, -1.0, 0.0, 0.5, 1.0, 2.0]
}
fn default_eps() -> EpsSequence {
    EpsSequence::RootLog { eta: 0.5 }
}
fn default_sj() -> SjSequence {
    SjSequence::JLogDown { kappa: 1.0 }
}
fn default_rho() -> f64 {
    2.0
}
fn default_radius() -> u64 {
    1
}
fn default_fraction() -> f64 {
    0.5
}
fn default_samples() -> u32 {
    200
}
fn default_j_min() -> u32 {
    8
}
fn default_xis() -> Vec<f64> {
    vec![1.0, 1.5, 2.0]
}
fn default_threshold() -> f64 {
    0.9
}
fn default_point_tail() -> u32 {
    6
}
fn default_horizon() -> u32 {
    10
}
fn default_iteration() -> u32 {
    1
}
fn default_tolerance() -> f64 {
    0.15
}

/// Everything that determines one run. Seed and config fix all outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    /// `n` (or `n_max`).
    #[serde(default = "default_depth")]
    pub depth: u32,
    #[serde(default = "default_replicas")]
    pub replicas: u32,
    #[serde(default)]
    pub tail_depth: u32,
    #[serde(default = "default_qs")]
    pub qs: Vec<f64>,
    /// α-grid; empty means `τ̃'(q)` for each `q`.
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default = "default_eps")]
    pub eps: EpsSequence,
    #[serde(default = "default_sj")]
    pub sj: SjSequence,
    #[serde(default = "default_rho")]
    pub rho_exponent: f64,
    #[serde(default = "default_radius")]
    pub neighbor_radius: u64,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Sampled points in growth-speed and conditioned ubiquity runs.
    #[serde(default = "default_samples")]
    pub samples: u32,
    /// Tail depth of the truncation used to draw μ_q-distributed points.
    #[serde(default = "default_point_tail")]
    pub point_tail_depth: u32,
    /// First `j` of the convergence experiment.
    #[serde(default = "default_j_min")]
    pub j_min: u32,
    #[serde(default = "default_xis")]
    pub xis: Vec<f64>,
    /// α of the limsup sets; defaults to `τ̃'(1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ubiquity_alpha: Option<f64>,
    #[serde(default = "default_iteration")]
    pub cover_iteration: u32,
    #[serde(default = "default_tolerance")]
    pub dimension_tolerance: f64,
    /// Also run the conditioned ubiquity check for each `q` and `ξ > 1`.
    #[serde(default)]
    pub conditioned: bool,
    #[serde(default = "default_horizon")]
    pub ubiquity_horizon: u32,
    #[serde(default = "default_threshold")]
    pub pass_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub model: ModelSpec,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, model: ModelSpec) -> Self {
        ExperimentConfig {
            kind: Some(kind),
            seed: 0,
            depth: default_depth(),
            replicas: default_replicas(),
            tail_depth: 0,
            qs: default_qs(),
            alphas: Vec::new(),
            eps: default_eps(),
            sj: default_sj(),
            rho_exponent: default_rho(),
            neighbor_radius: default_radius(),
            fraction: default_fraction(),
            samples: default_samples(),
            point_tail_depth: default_point_tail(),
            j_min: default_j_min(),
            xis: default_xis(),
            ubiquity_alpha: None,
            cover_iteration: default_iteration(),
            dimension_tolerance: default_tolerance(),
            conditioned: false,
            ubiquity_horizon: default_horizon(),
            pass_threshold: default_threshold(),
            out: None,
            model,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_text(&fs::read_to_string(path)?)
    }

    pub fn replica_seeds(&self) -> Vec<u64> {
        (0..self.replicas as u64).map(|r| replica_seed(self.seed, r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, message: message.into() }
    }
    fn warning(message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, message: message.into() }
    }
}

/// Largest `b^{depth}` materialized without a memory warning.
const MEMORY_WARNING_NODES: u128 = 1 << 27;

/// Static checks; never simulates.
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let model = match config.model.build() {
        Ok(m) => m,
        Err(e) => return vec![Diagnostic::error(format!("model: {e}"))],
    };
    let b = model.base();
    if config.replicas == 0 {
        out.push(Diagnostic::error("replicas must be at least 1"));
    }
    if config.depth == 0 {
        out.push(Diagnostic::error("depth must be at least 1"));
    }
    if let Err(e) = config.eps.validate() {
        out.push(Diagnostic::error(format!("eps: {e}")));
    }
    if let Err(e) = config.sj.validate() {
        out.push(Diagnostic::error(format!("sj: {e}")));
    }
    if !(config.fraction > 0.0 && config.fraction < 1.0) {
        out.push(Diagnostic::error(format!("fraction {} outside (0, 1)", config.fraction)));
    }
    if !(config.rho_exponent > 0.0) {
        out.push(Diagnostic::error("rho_exponent must be positive"));
    }
    if config.qs.is_empty() {
        out.push(Diagnostic::error("q-grid is empty"));
    }
    if config.qs.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Diagnostic::error("q-grid must be strictly increasing"));
    }
    if config.alphas.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Diagnostic::error("α-grid must be strictly increasing"));
    }
    match model.j_interval() {
        Ok(j) => {
            for q in &config.qs {
                if !j.contains(*q) {
                    out.push(Diagnostic::error(format!("q = {q} outside J = ({}, {})", j.lo, j.hi)));
                }
            }
        }
        Err(e) => out.push(Diagnostic::error(format!("J: {e}"))),
    }
    let nodes = (b as u128).checked_pow(config.depth + config.tail_depth).unwrap_or(u128::MAX);
    if nodes > DEFAULT_NODE_BUDGET as u128 {
        out.push(Diagnostic::warning(format!(
            "memory: {nodes} nodes at depth {} exceed the node budget {DEFAULT_NODE_BUDGET}; full fields will be refused",
            config.depth + config.tail_depth
        )));
    } else if nodes > MEMORY_WARNING_NODES / 8 {
        out.push(Diagnostic::warning(format!("memory: about {} MiB per field", nodes * 16 / (1 << 20))));
    }
    match config.kind {
        Some(ExperimentKind::Convergence) if config.j_min == 0 || config.j_min > config.depth => {
            out.push(Diagnostic::error(format!("j_min = {} outside 1..={}", config.j_min, config.depth)));
        }
        Some(ExperimentKind::Growthspeed) => {
            if config.depth < 5 {
                out.push(Diagnostic::error("growthspeed needs depth >= 5"));
            } else if growth_j_range(config).is_none() {
                out.push(Diagnostic::error(format!("no j >= 2 with S_j <= n_max - 4 = {}", config.depth - 4)));
            }
            if config.samples == 0 {
                out.push(Diagnostic::error("samples must be positive"));
            }
        }
        Some(ExperimentKind::Ubiquity) => {
            if config.xis.iter().any(|x| !(*x >= 1.0)) {
                out.push(Diagnostic::error("every ξ must be at least 1"));
            }
            if config.xis.is_empty() {
                out.push(Diagnostic::error("ξ list is empty"));
            }
            if config.conditioned && config.samples == 0 {
                out.push(Diagnostic::error("samples must be positive"));
            }
        }
        _ => {}
    }
    out
}

/// Named pass/fail outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

/// One output table with its JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub header: serde_json::Value,
    pub table: Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub kind: ExperimentKind,
    pub files: Vec<OutputFile>,
    pub checks: Vec<Check>,
    pub seeds: Vec<u64>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub runtime_secs: f64,
    pub all_passed: bool,
}

fn header(config: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
    let mut h = json!({
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "model": config.model,
        "depth": config.depth,
        "tail_depth": config.tail_depth,
        "eps": config.eps.label(),
    });
    if let (Some(map), serde_json::Value::Object(more)) = (h.as_object_mut(), extra) {
        map.extend(more);
    }
    h
}

/// Runs the experiment in memory.
pub fn execute(config: &ExperimentConfig) -> Result<Outcome> {
    let errors: Vec<String> = validate(config)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.message)
        .collect();
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("; ")));
    }
    let kind = config.kind.ok_or_else(|| Error::Config("experiment kind missing".into()))?;
    let model = Arc::new(config.model.build()?);
    match kind {
        ExperimentKind::Spectrum => spectrum(config, model),
        ExperimentKind::Convergence => convergence(config, model),
        ExperimentKind::Growthspeed => growthspeed(config, model),
        ExperimentKind::Ldrenewal => ldrenewal(config, model),
        ExperimentKind::Ubiquity => ubiquity(config, model),
    }
}

/// Runs the experiment and writes `<name>.csv` files and `summary.json` into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    let start = Instant::now();
    let outcome = execute(config)?;
    write_outcome(config, &outcome, out_dir, start.elapsed().as_secs_f64())
}

pub fn write_outcome(config: &ExperimentConfig, outcome: &Outcome, out_dir: &Path, runtime_secs: f64) -> Result<Summary> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for f in &outcome.files {
        let path: PathBuf = out_dir.join(format!("{}.csv", f.name));
        let file = fs::File::create(&path)?;
        f.table.write(std::io::BufWriter::new(file), &f.header)?;
        files.push(format!("{}.csv", f.name));
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        kind: outcome.kind.name().into(),
        config: serde_json::to_value(config).map_err(|e| Error::Io(e.to_string()))?,
        seeds: outcome.seeds.clone(),
        checks: outcome.checks.clone(),
        files,
        runtime_secs,
        all_passed: outcome.passed(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(summary)
}

fn alphas_for(config: &ExperimentConfig, model: &WeightModel) -> Vec<f64> {
    if config.alphas.is_empty() {
        let mut a: Vec<f64> = config.qs.iter().map(|&q| model.tau_tilde_prime(q).value).collect();
        a.sort_by(|x, y| x.partial_cmp(y).expect("finite slopes"));
        a.dedup();
        a
    } else {
        config.alphas.clone()
    }
}

fn spectrum(config: &ExperimentConfig, model: Arc<WeightModel>) -> Result<Outcome> {
    let seeds = config.replica_seeds();
    let n = config.depth;
    let alphas = alphas_for(config, &model);
    let per_replica: Vec<(StructureFunction, f64, crate::analysis::SpectrumEstimate)> = seeds
        .par_iter()
        .map(|&seed| {
            let tree = CascadeTree::new(model.clone(), seed);
            let field = tree.leaf_masses(n, None, Construction::Nondegenerate, config.tail_depth)?;
            let sf = StructureFunction::compute(&field, n, &config.qs)?;
            let tau0 = partition_function(&field, n, 0.0)?;
            let spec = ld_spectrum(&field, n, &alphas, &config.eps)?;
            Ok((sf, tau0, spec))
        })
        .collect::<Result<_>>()?;
    let tau_tilde: Vec<f64> = config.qs.iter().map(|&q| model.tau_tilde(q).value()).collect();
    let legendre: Vec<f64> = alphas.iter().map(|&a| model_legendre(&model, a).value).collect();

    let mut tau = Table::new(&["replica", "q", "tau_n", "tau_tilde"]);
    let mut spec = Table::new(&["replica", "alpha", "count", "ld", "legendre"]);
    let mut max_err: f64 = 0.0;
    let mut max_tau0: f64 = 0.0;
    let mut max_second: f64 = f64::NEG_INFINITY;
    for (r, (sf, tau0, est)) in per_replica.iter().enumerate() {
        for (k, q) in sf.qs.iter().enumerate() {
            tau.push(vec![r.to_string(), fmt_float(*q), fmt_float(sf.values[k]), fmt_float(tau_tilde[k])]);
            max_err = max_err.max((sf.values[k] - tau_tilde[k]).abs());
        }
        for k in 1..sf.values.len().saturating_sub(1) {
            let (h0, h1) = (sf.qs[k] - sf.qs[k - 1], sf.qs[k + 1] - sf.qs[k]);
            // Divided second difference scaled to a unit step.
            let second = (sf.values[k + 1] - sf.values[k]) / h1 - (sf.values[k] - sf.values[k - 1]) / h0;
            max_second = max_second.max(second * h0.min(h1));
        }
        max_tau0 = max_tau0.max((tau0 + 1.0).abs());
        for (k, a) in est.alphas.iter().enumerate() {
            spec.push(vec![r.to_string(), fmt_float(*a), est.counts[k].to_string(), fmt_float(est.ld[k]), fmt_float(legendre[k])]);
        }
    }
    let mut checks = vec![
        Check::new("tau-at-zero", max_tau0 < 1e-12, format!("max |τ_n(0) + 1| = {max_tau0:e}")),
        Check::new("tau-concave", max_second <= 1e-9, format!("max second difference = {max_second:e}")),
    ];
    if matches!(config.model, ModelSpec::Deterministic { .. }) {
        checks.push(Check::new("deterministic-oracle", max_err < 1e-9, format!("max |τ_n - τ̃| = {max_err:e}")));
    }
    let extra = json!({ "n": n, "replicas": config.replicas });
    Ok(Outcome {
        kind: ExperimentKind::Spectrum,
        files: vec![
            OutputFile { name: "tau".into(), header: header(config, extra.clone()), table: tau },
            OutputFile { name: "spectrum".into(), header: header(config, extra), table: spec },
        ],
        checks,
        seeds,
    })
}

/// Average ranks (ties share the mean rank).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].partial_cmp(&xs[*b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman's ρ with the two-sided p-value of the t approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (n as f64 + 1.0) / 2.0;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    let rho = sxy / (sxx * syy).sqrt();
    if n < 3 || !rho.is_finite() {
        return (rho, f64::NAN);
    }
    if rho.abs() >= 1.0 {
        return (rho, 0.0);
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (rho, 2.0 * (1.0 - dist.cdf(t.abs())))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn convergence(config: &ExperimentConfig, model: Arc<WeightModel>) -> Result<Outcome> {
    let seeds = config.replica_seeds();
    let depth = config.depth;
    let js: Vec<u32> = (config.j_min.max(2)..=depth).collect();
    let tau_tilde: Vec<f64> = config.qs.iter().map(|&q| model.tau_tilde(q).value()).collect();
    // values[r][qi][ji] = τ_j(q)
    let values: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let tree = CascadeTree::new(model.clone(), seed);
            let field = tree.leaf_masses(depth, None, Construction::Nondegenerate, config.tail_depth)?;
            config
                .qs
                .iter()
                .map(|&q| js.iter().map(|&j| partition_function(&field, j, q)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = Table::new(&["replica", "q", "j", "tau_j", "tau_tilde", "scaled_error"]);
    for (r, per_q) in values.iter().enumerate() {
        for (qi, q) in config.qs.iter().enumerate() {
            for (ji, j) in js.iter().enumerate() {
                let err = *j as f64 * (per_q[qi][ji] - tau_tilde[qi]).abs();
                rows.push(vec![
                    r.to_string(),
                    fmt_float(*q),
                    j.to_string(),
                    fmt_float(per_q[qi][ji]),
                    fmt_float(tau_tilde[qi]),
                    fmt_float(err),
                ]);
            }
        }
    }
    let mut medians = Table::new(&["q", "j", "median_scaled_error_over_log_j"]);
    let mut checks = Vec::new();
    for (qi, q) in config.qs.iter().enumerate() {
        let med: Vec<f64> = js
            .iter()
            .enumerate()
            .map(|(ji, j)| {
                let mut v: Vec<f64> = values
                    .iter()
                    .map(|per_q| *j as f64 * (per_q[qi][ji] - tau_tilde[qi]).abs() / (*j as f64).ln())
                    .collect();
                median(&mut v)
            })
            .collect();
        for (ji, j) in js.iter().enumerate() {
            medians.push(vec![fmt_float(*q), j.to_string(), fmt_float(med[ji])]);
        }
        let jf: Vec<f64> = js.iter().map(|j| *j as f64).collect();
        let (rho, p) = spearman(&jf, &med);
        checks.push(Check::new(
            format!("convergence-trend q={q}"),
            rho < 0.0 && p < 0.05,
            format!("Spearman rho = {rho:.4}, p = {p:.3e}"),
        ));
    }
    let extra = json!({ "replicas": config.replicas, "j_min": config.j_min });
    Ok(Outcome {
        kind: ExperimentKind::Convergence,
        files: vec![
            OutputFile { name: "convergence".into(), header: header(config, extra.clone()), table: rows },
            OutputFile { name: "convergence_median".into(), header: header(config, extra), table: medians },
        ],
        checks,
        seeds,
    })
}

/// `(j_lo, j_max)`: `j_max` is the largest `j` with `S_j <= n_max - 4` and
/// the per-point check covers `j` in the upper half `[⌈j_max/2⌉, j_max]`.
pub fn growth_j_range(config: &ExperimentConfig) -> Option<(u32, u32)> {
    let bound = config.depth.checked_sub(4)? as u64;
    let j_max = config.sj.last_index_within(bound, 1024).filter(|&j| j >= 2)?;
    Some((j_max.div_ceil(2).max(2), j_max))
}

/// Growth speeds at `w = w^{(j)}(t)` of a μ_q-distributed point `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub q: f64,
    pub sample: u32,
    pub j: u32,
    pub word_index: u64,
    /// `GS(μ_q^w, μ^w, τ̃'(q))`.
    pub gs_mu: Option<u32>,
    /// `GS(μ_q^w, μ_q^w, qτ̃'(q) - τ̃(q))`.
    pub gs_mu_q: Option<u32>,
    pub s_j: u64,
    pub passed: bool,
}

pub fn growth_records(config: &ExperimentConfig, model: Arc<WeightModel>, q: f64) -> Result<Vec<GrowthRecord>> {
    let (_, j_max) = growth_j_range(config).ok_or_else(|| Error::Config("empty j range".into()))?;
    let n_max = config.depth;
    let alpha_mu = model.tau_tilde_prime(q).value;
    let alpha_q = model.legendre_at_tangency(q);
    let seeds = config.replica_seeds();
    let per_sample: Vec<Vec<GrowthRecord>> = (0..config.samples)
        .into_par_iter()
        .map(|m| {
            let tree = CascadeTree::new(model.clone(), seeds[m as usize % seeds.len()]);
            let point = tree.tilted_point(q, j_max, config.point_tail_depth, m as u64)?;
            (2..=j_max)
                .map(|j| {
                    let w = point.prefix(j);
                    let fields = tree.copy_fields(&w, n_max, &[None, Some(q)], Construction::Nondegenerate, config.tail_depth)?;
                    let gs_mu = growth_speed(&fields[1], &fields[0], alpha_mu, config.neighbor_radius, &config.eps, config.fraction, n_max)?;
                    let gs_mu_q = growth_speed(&fields[1], &fields[1], alpha_q, config.neighbor_radius, &config.eps, config.fraction, n_max)?;
                    let s_j = config.sj.at(j);
                    let passed = gs_mu.is_some_and(|g| g as u64 <= s_j) && gs_mu_q.is_some_and(|g| g as u64 <= s_j);
                    Ok(GrowthRecord { q, sample: m, j, word_index: w.index(), gs_mu, gs_mu_q, s_j, passed })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

fn opt(x: Option<u32>) -> String {
    x.map_or_else(|| "NA".into(), |v| v.to_string())
}

fn growthspeed(config: &ExperimentConfig, model: Arc<WeightModel>) -> Result<Outcome> {
    let (j_lo, j_max) = growth_j_range(config).ok_or_else(|| Error::Config("empty j range".into()))?;
    let mut table = Table::new(&["q", "sample", "j", "word_index", "gs_mu", "gs_mu_q", "s_j", "pass"]);
    let mut checks = Vec::new();
    for &q in &config.qs {
        let records = growth_records(config, model.clone(), q)?;
        for r in &records {
            table.push(vec![
                fmt_float(q),
                r.sample.to_string(),
                r.j.to_string(),
                r.word_index.to_string(),
                opt(r.gs_mu),
                opt(r.gs_mu_q),
                r.s_j.to_string(),
                r.passed.to_string(),
            ]);
        }
        let samples = config.samples as usize;
        let point_pass = (0..config.samples)
            .filter(|m| records.iter().filter(|r| r.sample == *m && r.j >= j_lo).all(|r| r.passed))
            .count();
        let pair_pass = records.iter().filter(|r| r.passed).count();
        let fraction = point_pass as f64 / samples as f64;
        checks.push(Check::new(
            format!("growth-speed q={q}"),
            fraction >= config.pass_threshold,
            format!(
                "{point_pass}/{samples} points pass for all j in [{j_lo}, {j_max}]; {pair_pass}/{} (t, j) pairs pass over j in [2, {j_max}]",
                records.len()
            ),
        ));
    }
    let extra = json!({ "n_max": config.depth, "sj": config.sj.label(), "j_range": [j_lo, j_max], "samples": config.samples });
    Ok(Outcome {
        kind: ExperimentKind::Growthspeed,
        files: vec![OutputFile { name: "growthspeed".into(), header: header(config, extra), table }],
        checks,
        seeds: config.replica_seeds(),
    })
}

/// Box count of μ at `α = τ̃'(q)` against `qτ̃'(q) - τ̃(q)` for one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalRecord {
    pub q: f64,
    pub count: u64,
    pub ld: f64,
    pub target: f64,
    pub deviation: f64,
    pub bound: f64,
    pub passed: bool,
}

pub fn renewal_records(tree: &CascadeTree, n: u32, tail_depth: u32, qs: &[f64], eps: &EpsSequence) -> Result<Vec<RenewalRecord>> {
    let model = tree.model();
    let b = tree.base() as f64;
    let mut tilts: Vec<Option<f64>> = vec![None];
    tilts.extend(qs.iter().map(|q| Some(*q)));
    let fields: Vec<MassField> = tree.copy_fields(&Word::empty(tree.base()), n, &tilts, Construction::Nondegenerate, tail_depth)?;
    let e = eps.at(n);
    qs.iter()
        .enumerate()
        .map(|(k, &q)| {
            let alpha = model.tau_tilde_prime(q).value;
            let count = box_count(&fields[0], n, alpha, e)?;
            let ld = if count == 0 { f64::NEG_INFINITY } else { (count as f64).ln() / (n as f64 * b.ln()) };
            let target = model.legendre_at_tangency(q);
            let y_q = fields[k + 1].total_mass();
            let bound = (1.0 + q.abs()) * e + (y_q.ln() / b.ln()).abs() / n as f64;
            let deviation = (ld - target).abs();
            Ok(RenewalRecord { q, count, ld, target, deviation, bound, passed: deviation <= bound })
        })
        .collect()
}

fn ldrenewal(config: &ExperimentConfig, model: Arc<WeightModel>) -> Result<Outcome> {
    let seeds = config.replica_seeds();
    let per_replica: Vec<Vec<RenewalRecord>> = seeds
        .par_iter()
        .map(|&seed| {
            let tree = CascadeTree::new(model.clone(), seed);
            renewal_records(&tree, config.depth, config.tail_depth, &config.qs, &config.eps)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&["replica", "q", "n", "count", "ld", "target", "deviation", "bound", "pass"]);
    for (r, recs) in per_replica.iter().enumerate() {
        for rec in recs {
            table.push(vec![
                r.to_string(),
                fmt_float(rec.q),
                config.depth.to_string(),
                rec.count.to_string(),
                fmt_float(rec.ld),
                fmt_float(rec.target),
                fmt_float(rec.deviation),
                fmt_float(rec.bound),
                rec.passed.to_string(),
            ]);
        }
    }
    let checks = config
        .qs
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let passed = per_replica.iter().filter(|recs| recs[k].passed).count();
            let fraction = passed as f64 / per_replica.len() as f64;
            Check::new(
                format!("ld-renewal q={q}"),
                fraction >= config.pass_threshold,
                format!("{passed}/{} replicas inside the band", per_replica.len()),
            )
        })
        .collect();
    let extra = json!({ "n": config.depth, "replicas": config.replicas });
    Ok(Outcome {
        kind: ExperimentKind::Ldrenewal,
        files: vec![OutputFile { name: "ldrenewal".into(), header: header(config, extra), table }],
        checks,
        seeds,
    })
}

fn ubiquity(config: &ExperimentConfig, model: Arc<WeightModel>) -> Result<Outcome> {
    let seed = replica_seed(config.seed, 0);
    let tree = CascadeTree::new(model.clone(), seed);
    let depth = config.depth;
    let field = tree.leaf_masses(depth, None, Construction::Nondegenerate, config.tail_depth)?;
    let system = PointSystem::badic(model.base(), depth)?;
    let alpha = config.ubiquity_alpha.unwrap_or_else(|| model.tau_tilde_prime(1.0).value);
    let tau_star = model_legendre(&model, alpha).value;
    let mut table = Table::new(&["xi", "alpha", "depth", "dimension", "r_squared", "target"]);
    let mut checks = Vec::new();
    let estimates: Vec<(f64, Result<crate::ubiquity::DimensionEstimate>)> = config
        .xis
        .iter()
        .map(|&xi| {
            let est = limsup_cover(&system, &field, alpha, xi, &config.eps, config.cover_iteration)
                .and_then(|cover| box_dimension(&cover, depth));
            (xi, est)
        })
        .collect();
    for (xi, est) in estimates {
        let target = tau_star / xi;
        match est {
            Ok(d) => {
                table.push(vec![fmt_float(xi), fmt_float(alpha), depth.to_string(), fmt_float(d.dimension), fmt_float(d.r_squared), fmt_float(target)]);
                let err = (d.dimension - target).abs();
                checks.push(Check::new(
                    format!("ubiquity-dimension xi={xi}"),
                    err <= config.dimension_tolerance,
                    format!("dimension {:.4} vs τ*/ξ = {target:.4} (R² = {:.4})", d.dimension, d.r_squared),
                ));
            }
            Err(e) => {
                table.push(vec![fmt_float(xi), fmt_float(alpha), depth.to_string(), "NA".into(), "NA".into(), fmt_float(target)]);
                checks.push(Check::new(format!("ubiquity-dimension xi={xi}"), false, e.to_string()));
            }
        }
    }
    let mut files = vec![OutputFile {
        name: "ubiquity".into(),
        header: header(config, json!({ "alpha": alpha, "tau_star": tau_star, "system": "b-adic" })),
        table,
    }];
    if config.conditioned {
        let horizon = config.ubiquity_horizon;
        let csystem = PointSystem::badic(model.base(), horizon)?;
        let params = UbiquityParams {
            neighbor_radius: config.neighbor_radius,
            eps: config.eps.clone(),
            kappa: match config.sj {
                SjSequence::JLogDown { kappa } => kappa,
                _ => 1.0,
            },
            rho_exponent: config.rho_exponent,
            copy_depth: horizon,
            tail_depth: config.tail_depth,
            fraction: config.fraction,
        };
        let mut ct = Table::new(&["q", "xi", "horizon", "samples", "fraction", "ratio_min", "ratio_max"]);
        for &q in &config.qs {
            for &xi in config.xis.iter().filter(|x| **x > 1.0) {
                let report = conditioned_ubiquity_check(&tree, q, xi, config.samples as usize, horizon, &csystem, &params)?;
                ct.push(vec![
                    fmt_float(q),
                    fmt_float(xi),
                    horizon.to_string(),
                    config.samples.to_string(),
                    fmt_float(report.fraction),
                    fmt_float(report.ratio_range.0),
                    fmt_float(report.ratio_range.1),
                ]);
                checks.push(Check::new(
                    format!("conditioned-ubiquity q={q} xi={xi}"),
                    report.fraction >= config.pass_threshold,
                    format!("pass fraction {:.3}", report.fraction),
                ));
            }
        }
        files.push(OutputFile { name: "ubiquity_conditioned".into(), header: header(config, json!({ "horizon": horizon })), table: ct });
    }
    Ok(Outcome { kind: ExperimentKind::Ubiquity, files, checks, seeds: vec![seed] })
}

/// Fast exact checks of the core identities.
pub fn selftest() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let binomial = Arc::new(WeightModel::deterministic(2, vec![0.25, 0.75])?);
    let lognormal = Arc::new(WeightModel::lognormal(2, 0.05)?);

    let mut worst: f64 = 0.0;
    for m in [&binomial, &lognormal] {
        worst = worst.max((m.tau_tilde(0.0).value() + 1.0).abs()).max(m.tau_tilde(1.0).value().abs());
    }
    checks.push(Check::new("normalization", worst < 1e-12, format!("max error {worst:e}")));

    let field = CascadeTree::new(binomial.clone(), 0).leaf_masses(12, None, Construction::Nondegenerate, 0)?;
    let mut oracle: f64 = 0.0;
    for k in -50..=50 {
        let q = k as f64 / 10.0;
        oracle = oracle.max((partition_function(&field, 12, q)? - binomial.tau_tilde(q).value()).abs());
    }
    checks.push(Check::new("deterministic-oracle", oracle < 1e-9, format!("max |τ_12 - τ̃| = {oracle:e}")));

    let tree = CascadeTree::new(lognormal.clone(), 7);
    let v = Word::from_digits(2, &[1, 0, 1])?;
    let w = Word::from_digits(2, &[0, 1, 1, 0])?;
    let lhs = tree.mass(&v.concat(&w)?, 0)?;
    let rhs = tree.mass_in_copy(&v, &w, 0)? * tree.mass(&v, 0)?;
    let rel = (lhs - rhs).abs() / lhs;
    checks.push(Check::new("copy-recursion", rel < 1e-12, format!("relative error {rel:e}")));

    let leb = MassField::from_leaf_masses(2, vec![1.0 / 16.0; 16])?;
    let s = s_diagnostic(&leb, &leb, 1.0, 1, 0.5, 0.5, 4)?;
    checks.push(Check::new("s-diagnostic", (s - 2.875).abs() < 1e-12, format!("S_4 = {s}")));
    Ok(checks)
}
