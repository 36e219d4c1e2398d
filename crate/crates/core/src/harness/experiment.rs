//! Parallel replications and their aggregation.
//!
//! Replications run on the rayon pool and are collected in replication
//! order before any floating-point reduction, so a summary does not depend
//! on the number of workers.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::replication::{CheckpointRecord, ReplicationRecord, Runner};
use super::rng::SEED_SCHEME;
use super::scenario::ScenarioConfig;
use crate::error::{CarError, Result};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// A Monte Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// Mean with standard error `sd / sqrt(R)`.
    pub fn mean(xs: &[f64]) -> Self {
        let r = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / r;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            0.0
        };
        Estimate {
            value: m,
            se: (var / r).sqrt(),
        }
    }

    /// Sample variance (divisor `R - 1`) with the delta-method standard
    /// error `sqrt((m4 - s^4) / R)`.
    pub fn variance(xs: &[f64]) -> Self {
        let r = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / r;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / r;
        Estimate {
            value: m2 * r / (r - 1.0),
            se: ((m4 - m2 * m2).max(0.0) / r).sqrt(),
        }
    }

    /// Binomial proportion with standard error `sqrt(p (1 - p) / R)`.
    pub fn proportion(hits: usize, total: usize) -> Self {
        let p = hits as f64 / total as f64;
        Estimate {
            value: p,
            se: (p * (1.0 - p) / total as f64).sqrt(),
        }
    }

    /// Sample covariance with standard error `sd(product of deviations) / sqrt(R)`.
    pub fn covariance(xs: &[f64], ys: &[f64]) -> Self {
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
        Estimate::mean(&prods)
    }

    /// Pearson correlation with standard error `(1 - r^2) / sqrt(R - 1)`.
    pub fn correlation(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
        }
        let r = sxy / (sxx * syy).sqrt();
        Estimate {
            value: r,
            se: (1.0 - r * r) / (n - 1.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub n: usize,
    pub metrics: Vec<Metric>,
}

impl CheckpointSummary {
    pub fn get(&self, name: &str) -> Option<Estimate> {
        self.metrics.iter().find(|m| m.name == name).map(|m| Estimate {
            value: m.value,
            se: m.se,
        })
    }

    fn push(&mut self, name: impl Into<String>, e: Estimate) {
        self.metrics.push(Metric {
            name: name.into(),
            value: e.value,
            se: e.se,
        });
    }
}

/// Aggregated results of `R` replications.
///
/// Metric names per checkpoint:
/// `imb`, `imb_over_n`, `lambda_norm`, `lambda_norm_4th` (`E ||Lambda||^4`),
/// `arm_proportion`, then per unspecified feature `m`: `shift.m`
/// (`sum (T_i - rho) m / n`) and `variance.m` (variance of the same sum
/// over `sqrt(n)`); with an exogenous stream `covariance.zw`,
/// `correlation.zw`, `variance.z`, `variance.w`; for discrete maps
/// `variance.stratum.k` (variance of `D_n(k) / sqrt(n)`); with outcomes
/// `reject.classical`, `reject.adjusted`, `sigma_tilde_sq.1`,
/// `sigma_tilde_sq.2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub scenario_name: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub seed_scheme: String,
    pub replications: usize,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub checkpoints: Vec<CheckpointSummary>,
}

impl ExperimentSummary {
    pub fn at(&self, n: usize) -> Option<&CheckpointSummary> {
        self.checkpoints.iter().find(|c| c.n == n)
    }

    pub fn last(&self) -> &CheckpointSummary {
        self.checkpoints.last().expect("at least one checkpoint")
    }

    /// `(n, value)` pairs of one metric across checkpoints.
    pub fn series(&self, name: &str) -> Vec<(usize, Estimate)> {
        self.checkpoints
            .iter()
            .filter_map(|c| c.get(name).map(|e| (c.n, e)))
            .collect()
    }
}

/// Runs `scenario.replications` replications in parallel and aggregates.
pub fn run_experiment(scenario: &ScenarioConfig) -> Result<ExperimentSummary> {
    if scenario.replications < 2 {
        return Err(CarError::param("replications", "an experiment needs at least 2"));
    }
    let start = Instant::now();
    let runner = Runner::new(scenario)?;
    let records: Vec<ReplicationRecord> = (0..scenario.replications as u64)
        .into_par_iter()
        .map(|r| runner.replicate(r))
        .collect::<Result<_>>()?;
    let mut summary = aggregate(scenario, &records);
    summary.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Aggregates records in the order given. `wall_time_secs` is left at 0.
pub fn aggregate(scenario: &ScenarioConfig, records: &[ReplicationRecord]) -> ExperimentSummary {
    let grid = scenario.checkpoint_grid();
    let checkpoints = grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let at: Vec<&CheckpointRecord> = records.iter().map(|r| &r.checkpoints[k]).collect();
            summarize_checkpoint(scenario, n, &at)
        })
        .collect();
    ExperimentSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        scenario_name: scenario.name.clone(),
        scenario_hash: scenario.hash(),
        seed: scenario.seed,
        seed_scheme: SEED_SCHEME.to_string(),
        replications: records.len(),
        wall_time_secs: 0.0,
        notes: scenario.notes(),
        checkpoints,
    }
}

fn summarize_checkpoint(
    scenario: &ScenarioConfig,
    n: usize,
    at: &[&CheckpointRecord],
) -> CheckpointSummary {
    let nf = n as f64;
    let root = nf.sqrt();
    let collect = |f: &dyn Fn(&CheckpointRecord) -> f64| -> Vec<f64> { at.iter().map(|c| f(c)).collect() };
    let mut out = CheckpointSummary {
        n,
        metrics: Vec::new(),
    };

    let imb = collect(&|c| c.imb);
    out.push("imb", Estimate::mean(&imb));
    out.push("imb_over_n", Estimate::mean(&collect(&|c| c.imb / nf)));
    out.push("lambda_norm", Estimate::mean(&collect(&|c| c.imb.sqrt())));
    out.push("lambda_norm_4th", Estimate::mean(&collect(&|c| c.imb * c.imb)));
    out.push("arm_proportion", Estimate::mean(&collect(&|c| c.n1 as f64 / nf)));

    for (j, m) in scenario.unspecified.iter().enumerate() {
        out.push(format!("shift.{}", m.name), Estimate::mean(&collect(&|c| c.shift_sums[j] / nf)));
        out.push(
            format!("variance.{}", m.name),
            Estimate::variance(&collect(&|c| c.shift_sums[j] / root)),
        );
    }

    if scenario.exogenous.is_some() {
        let z = collect(&|c| c.z_sum.unwrap_or(f64::NAN) / root);
        let w = collect(&|c| c.w_sum.unwrap_or(f64::NAN) / root);
        out.push("covariance.zw", Estimate::covariance(&z, &w));
        out.push("correlation.zw", Estimate::correlation(&z, &w));
        out.push("variance.z", Estimate::variance(&z));
        out.push("variance.w", Estimate::variance(&w));
    }

    if let Some(strata) = at.first().and_then(|c| c.strata.as_ref()) {
        for k in 0..strata.len() {
            let d = collect(&|c| c.strata.as_ref().map_or(f64::NAN, |s| s[k]) / root);
            out.push(format!("variance.stratum.{k}"), Estimate::variance(&d));
        }
    }

    if scenario.outcome.is_some() {
        for (name, pick) in [
            ("reject.classical", (|c: &CheckpointRecord| c.classical) as fn(&CheckpointRecord) -> _),
            ("reject.adjusted", |c: &CheckpointRecord| c.adjusted),
        ] {
            let outcomes: Vec<bool> = at.iter().filter_map(|c| pick(c)).map(|t| t.reject).collect();
            if !outcomes.is_empty() {
                let hits = outcomes.iter().filter(|&&r| r).count();
                out.push(name, Estimate::proportion(hits, outcomes.len()));
            }
        }
        let tilde: Vec<[f64; 2]> = at.iter().filter_map(|c| c.sigma_tilde_sq).collect();
        if !tilde.is_empty() {
            for t in 0..2 {
                let v: Vec<f64> = tilde.iter().map(|s| s[t]).collect();
                out.push(format!("sigma_tilde_sq.{}", t + 1), Estimate::mean(&v));
            }
        }
    }
    out
}
