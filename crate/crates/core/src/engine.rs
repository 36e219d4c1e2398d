//! The sequential randomization state machine.
//!
//! Unit 1 goes to treatment 1 with probability `rho`. Unit `n > 1` goes to
//! treatment 1 with probability
//!
//! ```text
//! l( <Lambda_{n-1}, phi(X_n)> / (n-1)^gamma ),   Lambda_n = sum_{i<=n} (T_i - rho) phi(X_i)
//! ```
//!
//! where `T_i` is 1 for treatment 1 and 0 for treatment 2. Uniform draws
//! are always supplied by the caller so any trial can be replayed
//! bit-exactly from its log.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationFunction, AllocationSpec};
use crate::error::{CarError, Result};
use crate::feature_map::{scale_normalizer, FeatureMap, FeatureMapSpec};

pub const DEFAULT_GAMMA: f64 = 0.75;
pub const DEFAULT_C1: f64 = 1e-3;
pub const DEFAULT_C2: f64 = 1e3;

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_c1() -> f64 {
    DEFAULT_C1
}
fn default_c2() -> f64 {
    DEFAULT_C2
}

/// Treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Arm {
    Treatment1,
    Treatment2,
}

impl Arm {
    /// `T_i`: 1 for treatment 1, 0 for treatment 2.
    pub fn indicator(self) -> f64 {
        match self {
            Arm::Treatment1 => 1.0,
            Arm::Treatment2 => 0.0,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Arm::Treatment1 => 1,
            Arm::Treatment2 => 2,
        }
    }
}

impl From<Arm> for u8 {
    fn from(arm: Arm) -> u8 {
        arm.number()
    }
}

impl TryFrom<u8> for Arm {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Arm::Treatment1),
            2 => Ok(Arm::Treatment2),
            _ => Err(format!("arm must be 1 or 2, got {v}")),
        }
    }
}

/// Design parameters of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub rho: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub allocation: AllocationSpec,
    pub feature_map: FeatureMapSpec,
    /// Divide `Lambda` and `phi` by the running feature scale.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
}

impl TrialConfig {
    pub fn new(allocation: AllocationSpec, feature_map: FeatureMapSpec) -> Self {
        Self {
            rho: allocation.rho,
            gamma: DEFAULT_GAMMA,
            allocation,
            feature_map,
            normalize: false,
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(CarError::param(
                "rho",
                format!("must lie in (0, 1), got {}", self.rho),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CarError::param(
                "gamma",
                format!("must lie in [0, 1), got {}", self.gamma),
            ));
        }
        if self.allocation.rho != self.rho {
            return Err(CarError::param(
                "allocation.rho",
                format!(
                    "allocation rho {} differs from trial rho {}",
                    self.allocation.rho, self.rho
                ),
            ));
        }
        if !(self.c1 > 0.0 && self.c1 < self.c2) {
            return Err(CarError::param("c1", "need 0 < c1 < c2"));
        }
        Ok(())
    }
}

/// A validated design: configuration plus built allocation function and
/// feature map. Immutable; share it across replications behind an `Arc`.
#[derive(Debug, Clone)]
pub struct Design {
    config: TrialConfig,
    allocation: AllocationFunction,
    feature_map: FeatureMap,
}

impl Design {
    pub fn new(config: TrialConfig) -> Result<Self> {
        let feature_map = config.feature_map.build()?;
        Self::with_feature_map(config, feature_map)
    }

    /// Uses an already built map (for example a callback map); the map
    /// spec in `config` is ignored.
    pub fn with_feature_map(config: TrialConfig, feature_map: FeatureMap) -> Result<Self> {
        config.validate()?;
        if let Some(spec) = feature_map.spec() {
            if *spec != config.feature_map {
                return Err(CarError::param(
                    "feature_map",
                    "feature map does not match the configured spec",
                ));
            }
        }
        let allocation = config.allocation.build()?;
        Ok(Self {
            config,
            allocation,
            feature_map,
        })
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn rho(&self) -> f64 {
        self.config.rho
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma
    }

    pub fn allocation(&self) -> &AllocationFunction {
        &self.allocation
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    /// Empty trial state.
    pub fn init(&self) -> TrialState {
        let strata = self
            .feature_map
            .discrete_layout()
            .map(|layout| vec![0.0; layout.n_strata()]);
        TrialState {
            n: 0,
            n1: 0,
            lambda: vec![0.0; self.feature_map.q()],
            sum_sq_phi: 0.0,
            stratum_imbalance: strata,
            log: Vec::new(),
            keep_log: true,
            phi_buf: vec![0.0; self.feature_map.q()],
        }
    }

    /// Empty state that does not record the per-unit log.
    pub fn init_unlogged(&self) -> TrialState {
        let mut state = self.init();
        state.keep_log = false;
        state
    }

    /// The argument passed to the allocation function for the next unit,
    /// given its features. Zero for the first unit.
    pub fn signal(&self, state: &TrialState, phi: &[f64]) -> f64 {
        if state.n == 0 {
            return 0.0;
        }
        let inner: f64 = state.lambda.iter().zip(phi).map(|(a, b)| a * b).sum();
        let mut denom = (state.n as f64).powf(self.config.gamma);
        if self.config.normalize {
            // Both Lambda and phi are divided by the scale, hence the square.
            let s = scale_normalizer(state.sum_sq_phi, state.n, self.config.c1, self.config.c2)
                .expect("n >= 1 and c1 < c2 were validated");
            denom *= s * s;
        }
        inner / denom
    }

    /// Treatment-1 probability for a unit with features `phi`.
    pub fn probability_for_phi(&self, state: &TrialState, phi: &[f64]) -> f64 {
        if state.n == 0 {
            return self.config.rho;
        }
        self.allocation.value(self.signal(state, phi))
    }

    /// Treatment-1 probability for the next unit with covariates `x`.
    pub fn next_probability(&self, state: &TrialState, x: &[f64]) -> Result<f64> {
        let phi = self.feature_map.apply(x)?;
        let prob = self.probability_for_phi(state, &phi);
        if prob.is_nan() {
            return Err(CarError::InvalidInput(
                "allocation probability is NaN (non-finite covariates?)".into(),
            ));
        }
        Ok(prob)
    }

    /// Assigns the next unit: treatment 1 iff `u < probability`.
    pub fn assign(&self, state: &mut TrialState, x: &[f64], u: f64) -> Result<Arm> {
        Ok(self.assign_detailed(state, x, u)?.arm)
    }

    /// Like [`assign`](Self::assign) but also returns the probability used.
    pub fn assign_detailed(&self, state: &mut TrialState, x: &[f64], u: f64) -> Result<Step> {
        if !(0.0..1.0).contains(&u) {
            return Err(CarError::param("u", format!("must lie in [0, 1), got {u}")));
        }
        let mut phi = std::mem::take(&mut state.phi_buf);
        phi.resize(self.feature_map.q(), 0.0);
        let filled = self.feature_map.apply_into(x, &mut phi);
        let result = filled.and_then(|()| {
            let prob = self.probability_for_phi(state, &phi);
            if prob.is_nan() {
                return Err(CarError::InvalidInput(
                    "allocation probability is NaN (non-finite covariates?)".into(),
                ));
            }
            let arm = if u < prob {
                Arm::Treatment1
            } else {
                Arm::Treatment2
            };
            self.record(state, x, &phi, prob, u, arm);
            Ok(Step {
                arm,
                probability: prob,
                index: state.n,
            })
        });
        state.phi_buf = phi;
        result
    }

    fn record(&self, state: &mut TrialState, x: &[f64], phi: &[f64], prob: f64, u: f64, arm: Arm) {
        let w = arm.indicator() - self.config.rho;
        let mut norm_sq = 0.0;
        for (l, p) in state.lambda.iter_mut().zip(phi) {
            *l += w * p;
            norm_sq += p * p;
        }
        state.sum_sq_phi += norm_sq;
        state.n += 1;
        if arm == Arm::Treatment1 {
            state.n1 += 1;
        }
        if let (Some(strata), Some(layout)) = (
            state.stratum_imbalance.as_mut(),
            self.feature_map.discrete_layout(),
        ) {
            // covariates were validated by apply_into
            if let Ok(cell) = layout.cell(x) {
                strata[layout.stratum_index(&cell)] += w;
            }
        }
        if state.keep_log {
            state.log.push(UnitRecord {
                index: state.n,
                covariates: x.to_vec(),
                phi: phi.to_vec(),
                prob,
                u,
                arm,
            });
        }
    }

    pub fn imbalance_report(&self, state: &TrialState) -> ImbalanceReport {
        let imb = state.imb();
        let discrete = match (self.feature_map.discrete_layout(), &state.stratum_imbalance) {
            (Some(layout), Some(strata)) => {
                let mut marginal: Vec<Vec<f64>> =
                    layout.levels.iter().map(|&m| vec![0.0; m]).collect();
                let mut cells = Vec::with_capacity(strata.len());
                for (s, &d) in strata.iter().enumerate() {
                    let levels = layout.stratum_levels(s);
                    for (l, &k) in levels.iter().enumerate() {
                        marginal[l][k] += d;
                    }
                    cells.push(StratumImbalance { levels, d });
                }
                Some(DiscreteImbalance {
                    marginal,
                    strata: cells,
                })
            }
            _ => None,
        };
        ImbalanceReport {
            n: state.n,
            imb,
            lambda_norm: imb.sqrt(),
            overall: state.overall_imbalance(self.config.rho),
            discrete,
        }
    }

    /// Rebuilds a trial from its log, checking that every logged
    /// probability and arm is reproduced exactly.
    pub fn replay<'a, I>(&self, records: I) -> Result<TrialState>
    where
        I: IntoIterator<Item = &'a UnitRecord>,
    {
        let mut state = self.init();
        for rec in records {
            if rec.index != state.n + 1 {
                return Err(CarError::ReplayMismatch {
                    index: rec.index,
                    message: format!("expected unit index {}", state.n + 1),
                });
            }
            let step = self.assign_detailed(&mut state, &rec.covariates, rec.u)?;
            if step.arm != rec.arm || step.probability.to_bits() != rec.prob.to_bits() {
                return Err(CarError::ReplayMismatch {
                    index: rec.index,
                    message: format!(
                        "logged arm {} with p={}, replay gives arm {} with p={}",
                        rec.arm.number(),
                        rec.prob,
                        step.arm.number(),
                        step.probability
                    ),
                });
            }
        }
        Ok(state)
    }
}

/// Result of one assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub arm: Arm,
    pub probability: f64,
    /// 1-based unit index.
    pub index: usize,
}

/// One line of the JSON-lines trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub index: usize,
    pub covariates: Vec<f64>,
    pub phi: Vec<f64>,
    pub prob: f64,
    pub u: f64,
    pub arm: Arm,
}

/// Running state of a trial. Mutated by [`Design::assign`] only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialState {
    pub n: usize,
    pub n1: usize,
    /// `Lambda_n`
    pub lambda: Vec<f64>,
    pub sum_sq_phi: f64,
    /// `D_n(k_1..k_p)` per stratum, discrete maps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum_imbalance: Option<Vec<f64>>,
    #[serde(default)]
    pub log: Vec<UnitRecord>,
    #[serde(skip, default = "yes")]
    keep_log: bool,
    #[serde(skip)]
    phi_buf: Vec<f64>,
}

fn yes() -> bool {
    true
}

impl TrialState {
    pub fn n2(&self) -> usize {
        self.n - self.n1
    }

    /// `Imb_n = ||Lambda_n||^2`
    pub fn imb(&self) -> f64 {
        self.lambda.iter().map(|v| v * v).sum()
    }

    /// `D_n = N_{n,1} - rho n`
    pub fn overall_imbalance(&self, rho: f64) -> f64 {
        self.n1 as f64 - rho * self.n as f64
    }

    pub fn log(&self) -> &[UnitRecord] {
        &self.log
    }

    /// Writes the log as JSON lines.
    pub fn write_log<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads a JSON-lines trial log.
pub fn read_log<R: std::io::BufRead>(input: R) -> Result<Vec<UnitRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumImbalance {
    pub levels: Vec<usize>,
    pub d: f64,
}

/// Marginal `D_n(l; k)` (indexed `[l][k]`) and per-stratum imbalances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteImbalance {
    pub marginal: Vec<Vec<f64>>,
    pub strata: Vec<StratumImbalance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub n: usize,
    pub imb: f64,
    pub lambda_norm: f64,
    /// `D_n`
    pub overall: f64,
    /// Present for discrete feature maps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete: Option<DiscreteImbalance>,
}
