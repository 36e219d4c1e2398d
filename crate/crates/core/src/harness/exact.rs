//! Exhaustive enumeration of all `2^n` assignment paths for a fixed
//! covariate sequence.
//!
//! The chain is recomputed here from the allocation function and feature
//! map alone, without going through [`Design::assign`](crate::Design::assign),
//! so it serves as an independent oracle for the engine.

use serde::{Deserialize, Serialize};

use super::scenario::ScenarioConfig;
use crate::engine::TrialConfig;
use crate::error::{CarError, Result};
use crate::feature_map::scale_normalizer;

pub const MAX_EXACT_N: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPath {
    /// Arm numbers (1 or 2) in unit order.
    pub arms: Vec<u8>,
    pub probability: f64,
    pub imb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactLaw {
    pub n: usize,
    pub paths: Vec<ExactPath>,
    /// `E Imb_n`
    pub mean_imb: f64,
    /// `E Lambda_n`
    pub mean_lambda: Vec<f64>,
    /// `P(N_{n,1} = k)` for `k = 0..=n`.
    pub n1_distribution: Vec<f64>,
    pub total_probability: f64,
}

struct Walker<'a> {
    config: &'a TrialConfig,
    alloc: crate::allocation::AllocationFunction,
    phis: Vec<Vec<f64>>,
    paths: Vec<ExactPath>,
}

impl Walker<'_> {
    // Unit `i` (0-based) given the first `i` arms and the running sums.
    fn walk(&mut self, arms: &mut Vec<u8>, lambda: &[f64], sum_sq: f64, prob: f64) {
        let i = arms.len();
        if i == self.phis.len() {
            self.paths.push(ExactPath {
                arms: arms.clone(),
                probability: prob,
                imb: lambda.iter().map(|v| v * v).sum(),
            });
            return;
        }
        let phi = self.phis[i].clone();
        let rho = self.config.rho;
        let p1 = if i == 0 {
            rho
        } else {
            let inner: f64 = lambda.iter().zip(&phi).map(|(a, b)| a * b).sum();
            let mut denom = (i as f64).powf(self.config.gamma);
            if self.config.normalize {
                let s = scale_normalizer(sum_sq, i, self.config.c1, self.config.c2)
                    .expect("validated constants");
                denom *= s * s;
            }
            self.alloc.value(inner / denom)
        };
        let norm_sq: f64 = phi.iter().map(|v| v * v).sum();
        for (arm, t, p) in [(1u8, 1.0, p1), (2u8, 0.0, 1.0 - p1)] {
            let next: Vec<f64> = lambda.iter().zip(&phi).map(|(l, f)| l + (t - rho) * f).collect();
            arms.push(arm);
            self.walk(arms, &next, sum_sq + norm_sq, prob * p);
            arms.pop();
        }
    }
}

/// Exact law of the first `n` units of a scenario with fixed covariates.
/// All `2^n` paths are listed, including those of probability zero.
pub fn exact_enumeration(scenario: &ScenarioConfig, n: usize) -> Result<ExactLaw> {
    if n == 0 || n > MAX_EXACT_N {
        return Err(CarError::param(
            "n",
            format!("exact enumeration supports 1..={MAX_EXACT_N} units, got {n}"),
        ));
    }
    scenario.validate()?;
    let rows = scenario
        .fixed_covariates
        .as_ref()
        .ok_or_else(|| CarError::param("fixed_covariates", "exact enumeration needs fixed covariates"))?;
    if rows.len() < n {
        return Err(CarError::param(
            "fixed_covariates",
            format!("need {n} rows, got {}", rows.len()),
        ));
    }
    let map = scenario.design.feature_map.build()?;
    let phis = rows[..n].iter().map(|x| map.apply(x)).collect::<Result<Vec<_>>>()?;
    let q = map.q();
    let mut walker = Walker {
        config: &scenario.design,
        alloc: scenario.design.allocation.build()?,
        phis,
        paths: Vec::with_capacity(1 << n),
    };
    walker.walk(&mut Vec::with_capacity(n), &vec![0.0; q], 0.0, 1.0);

    let rho = scenario.design.rho;
    let mut mean_imb = 0.0;
    let mut mean_lambda = vec![0.0; q];
    let mut n1_distribution = vec![0.0; n + 1];
    let mut total = 0.0;
    for path in &walker.paths {
        total += path.probability;
        mean_imb += path.probability * path.imb;
        let n1 = path.arms.iter().filter(|&&a| a == 1).count();
        n1_distribution[n1] += path.probability;
        for (arm, phi) in path.arms.iter().zip(&walker.phis) {
            let w = if *arm == 1 { 1.0 - rho } else { -rho };
            for (m, f) in mean_lambda.iter_mut().zip(phi) {
                *m += path.probability * w * f;
            }
        }
    }
    Ok(ExactLaw {
        n,
        paths: walker.paths,
        mean_imb,
        mean_lambda,
        n1_distribution,
        total_probability: total,
    })
}
