//! One simulated trial.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{stream_rng, Purpose};
use super::scenario::{ExogenousLaw, ScenarioConfig};
use crate::analysis::{adjusted_variances, classical_test, test_with_variances};
use crate::engine::{Arm, Design};
use crate::error::Result;
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub reject: bool,
}

/// Trial state observed after the first `n` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub n: usize,
    pub n1: usize,
    pub imb: f64,
    /// `sum (T_i - rho) m_j(X_i)`, one per unspecified feature.
    pub shift_sums: Vec<f64>,
    /// `sum (T_i - rho) Z_i`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_sum: Option<f64>,
    /// `sum W_i`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_sum: Option<f64>,
    /// Within-stratum imbalances `D_n(k)` for discrete maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classical: Option<TestOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusted: Option<TestOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_tilde_sq: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// A validated scenario with its design built once, ready to run
/// replications from any thread.
#[derive(Debug, Clone)]
pub struct Runner {
    scenario: ScenarioConfig,
    design: Design,
    grid: Vec<usize>,
    tau: f64,
}

impl Runner {
    pub fn new(scenario: &ScenarioConfig) -> Result<Self> {
        scenario.validate()?;
        Ok(Self {
            design: Design::new(scenario.design.clone())?,
            grid: scenario.checkpoint_grid(),
            tau: scenario.effect_tau(),
            scenario: scenario.clone(),
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.grid
    }

    /// Runs replication `r`. Deterministic in `(scenario, r)`.
    pub fn replicate(&self, r: u64) -> Result<ReplicationRecord> {
        let s = &self.scenario;
        let seed = s.seed;
        let mut cov_rng = stream_rng(seed, r, Purpose::Covariates);
        let mut assign_rng = stream_rng(seed, r, Purpose::Assignment);
        let mut out_rng = stream_rng(seed, r, Purpose::Outcomes);
        let mut exo_rng = stream_rng(seed, r, Purpose::Exogenous);

        let rho = self.design.rho();
        let q = self.design.feature_map().q();
        let mut state = self.design.init_unlogged();
        let mut x = vec![0.0; s.covariates.len()];
        let mut shift = vec![0.0; s.unspecified.len()];
        let mut z_sum = 0.0;
        let mut w_sum = 0.0;
        let keep_units = s.outcome.is_some();
        let mut y = Vec::with_capacity(if keep_units { s.n } else { 0 });
        let mut arms = Vec::with_capacity(y.capacity());
        let mut phi_rows = Vec::with_capacity(if keep_units { s.n * q } else { 0 });
        let mut phi = vec![0.0; q];
        let mut checkpoints = Vec::with_capacity(self.grid.len());
        let mut next = 0;

        for i in 0..s.n {
            match &s.fixed_covariates {
                Some(rows) => x.copy_from_slice(&rows[i]),
                None => {
                    for (xj, law) in x.iter_mut().zip(&s.covariates) {
                        *xj = law.sample(&mut cov_rng);
                    }
                }
            }
            let u: f64 = assign_rng.random();
            let arm = self.design.assign(&mut state, &x, u)?;
            let w = arm.indicator() - rho;
            for (acc, m) in shift.iter_mut().zip(&s.unspecified) {
                *acc += w * m.expr.eval(&x);
            }
            if let Some(exo) = &s.exogenous {
                z_sum += w * exo.z.eval(&x);
                let eps: f64 = exo_rng.sample(StandardNormal);
                w_sum += match &exo.w {
                    ExogenousLaw::IndependentNormal { sd } => sd * eps,
                    ExogenousLaw::CovariateTimesNoise { expr } => expr.eval(&x) * eps,
                };
            }
            if let Some(model) = &s.outcome {
                self.design.feature_map().apply_into(&x, &mut phi)?;
                // Both potential errors are drawn so the outcome stream does
                // not depend on the assignment.
                let e1 = model.errors[0].sample(&mut out_rng);
                let e2 = model.errors[1].sample(&mut out_rng);
                let extra = model.extra.as_ref().map_or(0.0, |e| e.eval(&x));
                let (t, err, effect) = match arm {
                    Arm::Treatment1 => (0, e1, self.tau),
                    Arm::Treatment2 => (1, e2, 0.0),
                };
                let lin: f64 = model.beta[t].iter().zip(&phi).map(|(b, f)| b * f).sum();
                y.push(model.mu[t] + effect + lin + extra + err);
                arms.push(arm);
                phi_rows.extend_from_slice(&phi);
            }

            if i + 1 == self.grid[next] {
                let n = i + 1;
                let mut rec = CheckpointRecord {
                    n,
                    n1: state.n1,
                    imb: state.imb(),
                    shift_sums: shift.clone(),
                    z_sum: s.exogenous.as_ref().map(|_| z_sum),
                    w_sum: s.exogenous.as_ref().map(|_| w_sum),
                    strata: state.stratum_imbalance.clone(),
                    classical: None,
                    adjusted: None,
                    sigma_tilde_sq: None,
                };
                if keep_units {
                    self.run_tests(&mut rec, &y, &arms, &phi_rows, q);
                }
                checkpoints.push(rec);
                next += 1;
            }
        }
        Ok(ReplicationRecord {
            replication: r,
            checkpoints,
        })
    }

    // Tests are skipped (left as None) when an arm has fewer than two units
    // or the variance estimate degenerates.
    fn run_tests(&self, rec: &mut CheckpointRecord, y: &[f64], arms: &[Arm], phi_rows: &[f64], q: usize) {
        let alpha = self.scenario.alpha;
        if let Ok(c) = classical_test(y, arms, alpha) {
            rec.classical = Some(TestOutcome {
                statistic: c.statistic,
                reject: c.reject,
            });
        }
        let phi = DMatrix::from_row_slice(y.len(), q, phi_rows);
        if let Ok(adj) = adjusted_variances(y, arms, &phi, self.design.rho()) {
            rec.sigma_tilde_sq = Some(adj.sigma_tilde_sq);
            if let Ok(t) = test_with_variances(y, arms, adj.sigma_tilde_sq, alpha) {
                rec.adjusted = Some(TestOutcome {
                    statistic: t.statistic,
                    reject: t.reject,
                });
            }
        }
    }
}

/// Builds the runner and runs replication `r`.
pub fn run_replication(scenario: &ScenarioConfig, r: u64) -> Result<ReplicationRecord> {
    Runner::new(scenario)?.replicate(r)
}
