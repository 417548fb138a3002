//! Recovery metrics against simulation truth and the replication harnesses
//! (recovery/coverage and DfD selection accuracy).
//!
//! Estimated components are matched to the true ones by the same greedy
//! signed matching used for draw alignment, so label switching and sign
//! flips never leak into the metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapError, Result};
use crate::ingest::format_float;
use crate::model::{whiten, Hyperparameters};
use crate::sampler::align::match_columns;
use crate::sampler::summary::{b_name, gamma_name};
use crate::sampler::{
    fit, order_components, summarize, HmcConfig, PosteriorSummary, SignedPermutation,
};
use crate::selection::{select_d, DfdCandidate};
use crate::simulate::{simulate, true_tangent_intercept, SimTruth};
use crate::spd::SpdMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub p: usize,
    pub n: usize,
    pub t: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub bonferroni: bool,
}

fn default_level() -> f64 {
    0.95
}

impl Scenario {
    pub fn new(p: usize, n: usize, t: usize) -> Self {
        Self {
            p,
            n,
            t,
            level: default_level(),
            bonferroni: false,
        }
    }

    pub fn label(&self) -> String {
        format!("p{}_n{}_T{}", self.p, self.n, self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMetrics {
    /// `|⟨γ̂^(k), γ^(k)⟩|` with `γ̂` the posterior mean.
    pub inner_product: f64,
    /// `‖β̂^(k) - β^(k)‖² / 2` over the non-intercept coefficients.
    pub beta_mse: f64,
    /// `(β̂₀^(k) - β₀^(k)*)²`
    pub intercept_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub components: Vec<ComponentMetrics>,
    pub sigma_error: f64,
}

impl MetricRow {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, c) in self.components.iter().enumerate() {
            out.push((format!("inner_product_{}", k + 1), c.inner_product));
            out.push((format!("beta_mse_{}", k + 1), c.beta_mse));
            out.push((format!("intercept_mse_{}", k + 1), c.intercept_mse));
        }
        out.push(("sigma_error".into(), self.sigma_error));
        out
    }
}

/// Matches the estimated components of `summary` to the true ones; returns
/// the signed permutation with `perm[k]` the estimated column for truth `k`.
fn match_to_truth(summary: &PosteriorSummary, truth: &SimTruth) -> Result<SignedPermutation> {
    if summary.p != truth.gamma.nrows() {
        return Err(CapError::Validation(format!(
            "summary has p = {} but the truth has p = {}",
            summary.p,
            truth.gamma.nrows()
        )));
    }
    if summary.d < truth.gamma.ncols() {
        return Err(CapError::Validation(format!(
            "summary has {} components, the truth needs {}",
            summary.d,
            truth.gamma.ncols()
        )));
    }
    if summary.q != truth.b.ncols() {
        return Err(CapError::Validation(format!(
            "summary has q = {} but the truth has q = {}",
            summary.q,
            truth.b.ncols()
        )));
    }
    Ok(match_columns(&summary.gamma_mean(), &truth.gamma))
}

/// Posterior-mean metrics for one fitted replication.
pub fn component_metrics(
    summary: &PosteriorSummary,
    truth: &SimTruth,
    sigma_star: &SpdMatrix,
) -> Result<MetricRow> {
    let sp = match_to_truth(summary, truth)?;
    let intercepts = true_tangent_intercept(truth, sigma_star)?;
    let gamma_hat = summary.gamma_mean();
    let b_hat = summary.b_mean();
    let components = (0..truth.gamma.ncols())
        .map(|k| {
            let j = sp.perm[k];
            let inner = gamma_hat.column(j).dot(&truth.gamma.column(k)).abs();
            let beta_mse = (1..truth.b.ncols())
                .map(|c| (b_hat[(j, c)] - truth.b[(k, c)]).powi(2))
                .sum::<f64>()
                / 2.0;
            ComponentMetrics {
                inner_product: inner,
                beta_mse,
                intercept_mse: (b_hat[(j, 0)] - intercepts[k]).powi(2),
            }
        })
        .collect();
    Ok(MetricRow {
        components,
        sigma_error: (summary.sigma().mean - truth.sigma).abs(),
    })
}

/// Whether each scalar's credible interval contains the truth. Names are
/// `gamma_j_k`, `beta_j_k` (slopes, `j ≥ 1`), `beta0_k`, and `sigma`, indexed
/// by true component. Loading intervals are flipped to the truth's sign.
pub fn coverage_hits(
    summary: &PosteriorSummary,
    truth: &SimTruth,
    sigma_star: &SpdMatrix,
) -> Result<Vec<(String, bool)>> {
    let sp = match_to_truth(summary, truth)?;
    let intercepts = true_tangent_intercept(truth, sigma_star)?;
    let lookup = |name: String| {
        summary
            .get(&name)
            .ok_or_else(|| CapError::Validation(format!("summary lacks `{name}`")))
    };
    let contains = |lo: f64, hi: f64, v: f64| lo <= v && v <= hi;
    let mut out = Vec::new();
    for k in 0..truth.gamma.ncols() {
        let (j, sign) = (sp.perm[k], sp.signs[k]);
        for r in 0..truth.gamma.nrows() {
            let s = lookup(gamma_name(r, j))?;
            let (lo, hi) = if sign < 0.0 {
                (-s.upper, -s.lower)
            } else {
                (s.lower, s.upper)
            };
            out.push((
                format!("gamma_{}_{}", r + 1, k + 1),
                contains(lo, hi, truth.gamma[(r, k)]),
            ));
        }
    }
    for k in 0..truth.gamma.ncols() {
        let j = sp.perm[k];
        for c in 1..truth.b.ncols() {
            let s = lookup(b_name(j, c))?;
            out.push((
                format!("beta_{}_{}", c, k + 1),
                contains(s.lower, s.upper, truth.b[(k, c)]),
            ));
        }
    }
    for k in 0..truth.gamma.ncols() {
        let s = lookup(b_name(sp.perm[k], 0))?;
        out.push((
            format!("beta0_{}", k + 1),
            contains(s.lower, s.upper, intercepts[k]),
        ));
    }
    let s = summary.sigma();
    out.push(("sigma".into(), contains(s.lower, s.upper, truth.sigma)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub seed: u64,
    pub metrics: MetricRow,
    pub covered: Vec<(String, bool)>,
    pub divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub replication: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub scenario: Scenario,
    pub replications: Vec<ReplicationOutcome>,
    pub failures: Vec<FailedReplication>,
    /// Metric means over successful replications.
    pub mean_metrics: BTreeMap<String, f64>,
    /// Per-scalar fraction of successful replications whose interval covers
    /// the truth.
    pub coverage: BTreeMap<String, f64>,
}

impl ReplicationReport {
    pub fn succeeded(&self) -> usize {
        self.replications.len()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.mean_metrics.get(metric).copied()
    }
}

/// HMC seed for a replication, decorrelated from the simulation stream.
fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

fn run_replication(
    scenario: &Scenario,
    replication: usize,
    seed: u64,
    hyper: &Hyperparameters,
    hmc: &HmcConfig,
) -> Result<ReplicationOutcome> {
    let (data, truth) = simulate(scenario.p, scenario.n, scenario.t, seed)?;
    let white = whiten(&data, 0.0)?;
    let config = HmcConfig {
        seed: sampler_seed(seed),
        ..hmc.clone()
    };
    let d = truth.gamma.ncols();
    let draws = order_components(fit(&white, d, hyper, &config)?);
    let summary = summarize(&draws, scenario.level, scenario.bonferroni);
    Ok(ReplicationOutcome {
        replication,
        seed,
        metrics: component_metrics(&summary, &truth, white.sigma_star())?,
        covered: coverage_hits(&summary, &truth, white.sigma_star())?,
        divergences: draws.total_divergences(),
    })
}

fn split_outcomes<T>(results: Vec<(usize, u64, Result<T>)>) -> (Vec<T>, Vec<FailedReplication>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (replication, seed, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push(FailedReplication {
                replication,
                seed,
                error: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

/// Simulates and fits one dataset per seed (in parallel), recording recovery
/// metrics and interval coverage. Failed replications are listed and
/// excluded from the aggregates.
pub fn coverage_experiment(
    scenario: &Scenario,
    seeds: &[u64],
    hyper: &Hyperparameters,
    hmc: &HmcConfig,
) -> Result<ReplicationReport> {
    if seeds.is_empty() {
        return Err(CapError::Argument(
            "at least one replication is required".into(),
        ));
    }
    if !(scenario.level > 0.0 && scenario.level < 1.0) {
        return Err(CapError::Argument(format!(
            "level must lie in (0, 1), got {}",
            scenario.level
        )));
    }
    hmc.validate()?;
    let results: Vec<_> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| (r, seed, run_replication(scenario, r, seed, hyper, hmc)))
        .collect();
    let (replications, failures) = split_outcomes(results);

    let mut mean_metrics = BTreeMap::new();
    let mut coverage = BTreeMap::new();
    if !replications.is_empty() {
        let m = replications.len() as f64;
        for rep in &replications {
            for (name, v) in rep.metrics.named() {
                *mean_metrics.entry(name).or_insert(0.0) += v / m;
            }
            for (name, hit) in &rep.covered {
                *coverage.entry(name.clone()).or_insert(0.0) += f64::from(u8::from(*hit)) / m;
            }
        }
    }
    Ok(ReplicationReport {
        scenario: scenario.clone(),
        replications,
        failures,
        mean_metrics,
        coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub replication: usize,
    pub seed: u64,
    pub chosen_d: usize,
    pub candidates: Vec<DfdCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfdAccuracyReport {
    pub scenario: Scenario,
    pub true_d: usize,
    pub d_max: usize,
    pub cutoff: f64,
    pub replications: Vec<SelectionOutcome>,
    pub failures: Vec<FailedReplication>,
    /// Fraction of successful replications choosing `true_d`; NaN if none
    /// succeeded.
    pub proportion_correct: f64,
}

/// Runs the DfD selection rule over `d = 1..=d_max` on one simulated dataset
/// per seed and reports how often the true number of components is chosen.
pub fn dfd_accuracy_experiment(
    scenario: &Scenario,
    seeds: &[u64],
    d_max: usize,
    cutoff: f64,
    hyper: &Hyperparameters,
    hmc: &HmcConfig,
) -> Result<DfdAccuracyReport> {
    if seeds.is_empty() {
        return Err(CapError::Argument(
            "at least one replication is required".into(),
        ));
    }
    hmc.validate()?;
    let results: Vec<_> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| {
            let outcome = simulate(scenario.p, scenario.n, scenario.t, seed)
                .and_then(|(data, _)| whiten(&data, 0.0))
                .and_then(|white| {
                    let config = HmcConfig {
                        seed: sampler_seed(seed),
                        ..hmc.clone()
                    };
                    select_d(&white, d_max, cutoff, hyper, &config)
                })
                .map(|report| SelectionOutcome {
                    replication: r,
                    seed,
                    chosen_d: report.chosen_d,
                    candidates: report.candidates,
                });
            (r, seed, outcome)
        })
        .collect();
    let (replications, failures) = split_outcomes(results);
    let true_d = 2;
    let correct = replications.iter().filter(|o| o.chosen_d == true_d).count();
    let proportion_correct = if replications.is_empty() {
        f64::NAN
    } else {
        correct as f64 / replications.len() as f64
    };
    Ok(DfdAccuracyReport {
        scenario: scenario.clone(),
        true_d,
        d_max,
        cutoff,
        replications,
        failures,
        proportion_correct,
    })
}

/// Appends `scenario,replication,metric,value` rows (with header when
/// `header` is set). Coverage indicators appear as `covered_<name>` ∈ {0, 1}.
pub fn write_long_csv<W: Write>(
    out: &mut W,
    report: &ReplicationReport,
    header: bool,
) -> Result<()> {
    if header {
        writeln!(out, "scenario,replication,metric,value")?;
    }
    let label = report.scenario.label();
    for rep in &report.replications {
        for (name, v) in rep.metrics.named() {
            writeln!(
                out,
                "{label},{},{name},{}",
                rep.replication + 1,
                format_float(v)
            )?;
        }
        for (name, hit) in &rep.covered {
            writeln!(
                out,
                "{label},{},covered_{name},{}",
                rep.replication + 1,
                u8::from(*hit)
            )?;
        }
    }
    Ok(())
}

/// Table-shaped coverage rows: `n,T,parameter,coverage`.
pub fn write_coverage_table<W: Write>(out: &mut W, reports: &[ReplicationReport]) -> Result<()> {
    writeln!(out, "n,T,parameter,coverage")?;
    for report in reports {
        for (name, c) in &report.coverage {
            writeln!(
                out,
                "{},{},{name},{}",
                report.scenario.n,
                report.scenario.t,
                format_float(*c)
            )?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}
