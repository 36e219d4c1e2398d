//! Scenario configuration: design, covariate law, unspecified features,
//! exogenous stream and outcome model. Versioned JSON.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{Design, TrialConfig};
use crate::error::{CarError, Result};
use crate::expr::Expr;
use crate::feature_map::FeatureMapSpec;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCENARIO_SCHEMA_VERSION
}
fn default_replications() -> usize {
    1000
}
fn default_alpha() -> f64 {
    0.05
}

/// Law of one covariate coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum CovariateLaw {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    /// Values 0 or 1.
    Bernoulli { p: f64 },
    /// Level indices `0..probs.len()`.
    Categorical { probs: Vec<f64> },
}

impl CovariateLaw {
    pub fn standard_normal() -> Self {
        CovariateLaw::Normal { mean: 0.0, sd: 1.0 }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let field = format!("covariates[{index}]");
        let ok = match self {
            CovariateLaw::Normal { mean, sd } => mean.is_finite() && *sd >= 0.0 && sd.is_finite(),
            CovariateLaw::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            CovariateLaw::Bernoulli { p } => (0.0..=1.0).contains(p),
            CovariateLaw::Categorical { probs } => {
                !probs.is_empty()
                    && probs.iter().all(|p| *p >= 0.0 && p.is_finite())
                    && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CarError::param(field, format!("invalid law {self:?}")))
        }
    }

    /// Number of distinct values for discrete laws.
    fn support_size(&self) -> Option<usize> {
        match self {
            CovariateLaw::Bernoulli { .. } => Some(2),
            CovariateLaw::Categorical { probs } => Some(probs.len()),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateLaw::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            CovariateLaw::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            CovariateLaw::Bernoulli { p } => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            CovariateLaw::Categorical { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k as f64;
                    }
                }
                (probs.len() - 1) as f64
            }
        }
    }
}

/// Mean-zero error law for outcome models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal { sd: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl ErrorLaw {
    pub fn variance(&self) -> f64 {
        match self {
            ErrorLaw::Normal { sd } => sd * sd,
            ErrorLaw::Uniform { half_width } => half_width * half_width / 3.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorLaw::Normal { sd } => sd * rng.sample::<f64, _>(StandardNormal),
            ErrorLaw::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
        }
    }

    fn valid(&self) -> bool {
        match self {
            ErrorLaw::Normal { sd } => *sd >= 0.0 && sd.is_finite(),
            ErrorLaw::Uniform { half_width } => *half_width >= 0.0 && half_width.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedExpr {
    pub name: String,
    pub expr: Expr,
}

impl NamedExpr {
    pub fn new(name: impl Into<String>, expr: Expr) -> Self {
        Self {
            name: name.into(),
            expr,
        }
    }
}

/// The exogenous stream `W`. Both laws have mean zero by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExogenousLaw {
    /// `W ~ N(0, sd^2)` independent of everything else.
    IndependentNormal { sd: f64 },
    /// `W = f(X) * eps` with `eps ~ N(0, 1)` independent: dependent on the
    /// covariates but mean zero.
    CovariateTimesNoise { expr: Expr },
}

/// Pair `(Z, W)` whose normalized sums are checked for asymptotic
/// independence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousSpec {
    pub z: Expr,
    pub w: ExogenousLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    /// Fixed `tau = mu_1 - mu_2` added to treatment 1.
    Fixed { tau: f64 },
    /// Local alternative `tau = delta / sqrt(n)` with `n` the scenario size.
    Local { delta: f64 },
}

/// `Y(t) = mu_t + <phi(X), beta_t> + extra(X) + eps_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub mu: [f64; 2],
    #[serde(default)]
    pub beta: [Vec<f64>; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<Expr>,
    pub errors: [ErrorLaw; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect: Option<Effect>,
}

/// A Monte Carlo scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub design: TrialConfig,
    /// Units per trial.
    pub n: usize,
    /// Sample sizes at which metrics are recorded; defaults to `[n]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<usize>,
    pub covariates: Vec<CovariateLaw>,
    /// Fixed covariate sequence for exact enumeration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_covariates: Option<Vec<Vec<f64>>>,
    /// Unspecified features `m_j(X)` whose imbalance is tracked.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unspecified: Vec<NamedExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exogenous: Option<ExogenousSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeModel>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, design: TrialConfig, n: usize, covariates: Vec<CovariateLaw>) -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: name.into(),
            design,
            n,
            checkpoints: Vec::new(),
            covariates,
            fixed_covariates: None,
            unspecified: Vec::new(),
            exogenous: None,
            outcome: None,
            replications: default_replications(),
            seed: 0,
            alpha: default_alpha(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Self = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Checkpoints in increasing order, ending at `n`.
    pub fn checkpoint_grid(&self) -> Vec<usize> {
        let mut grid = self.checkpoints.clone();
        grid.push(self.n);
        grid.sort_unstable();
        grid.dedup();
        grid
    }

    pub fn effect_tau(&self) -> f64 {
        match self.outcome.as_ref().and_then(|o| o.effect) {
            None => 0.0,
            Some(Effect::Fixed { tau }) => tau,
            Some(Effect::Local { delta }) => delta / (self.n as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(CarError::param(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCENARIO_SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        let design = Design::new(self.design.clone())?;
        let map = design.feature_map();
        if self.n == 0 {
            return Err(CarError::param("n", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(CarError::param("replications", "must be at least 1"));
        }
        if self.checkpoints.iter().any(|&c| c == 0 || c > self.n) {
            return Err(CarError::param("checkpoints", "must lie in 1..=n"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CarError::param("alpha", "must lie in (0, 1)"));
        }
        let p = map.p();
        if self.covariates.len() != p {
            return Err(CarError::param(
                "covariates",
                format!("feature map expects {p} covariates, got {}", self.covariates.len()),
            ));
        }
        for (i, law) in self.covariates.iter().enumerate() {
            law.validate(i)?;
        }
        if let FeatureMapSpec::Discrete { levels, .. } = &self.design.feature_map {
            for (i, (law, &m)) in self.covariates.iter().zip(levels).enumerate() {
                match law.support_size() {
                    Some(k) if k <= m => {}
                    _ => {
                        return Err(CarError::param(
                            format!("covariates[{i}]"),
                            format!("discrete map needs a categorical law with at most {m} levels"),
                        ))
                    }
                }
            }
        }
        if let Some(fixed) = &self.fixed_covariates {
            if fixed.len() < self.n {
                return Err(CarError::param(
                    "fixed_covariates",
                    format!("need {} rows, got {}", self.n, fixed.len()),
                ));
            }
            for x in fixed {
                map.apply(x)?;
            }
        }
        for m in &self.unspecified {
            m.expr
                .validate(p)
                .map_err(|e| CarError::param(format!("unspecified.{}", m.name), e.to_string()))?;
        }
        if let Some(exo) = &self.exogenous {
            exo.z
                .validate(p)
                .map_err(|e| CarError::param("exogenous.z", e.to_string()))?;
            match &exo.w {
                ExogenousLaw::IndependentNormal { sd } if *sd >= 0.0 => {}
                ExogenousLaw::IndependentNormal { .. } => {
                    return Err(CarError::param("exogenous.w.sd", "must be nonnegative"))
                }
                ExogenousLaw::CovariateTimesNoise { expr } => expr
                    .validate(p)
                    .map_err(|e| CarError::param("exogenous.w.expr", e.to_string()))?,
            }
        }
        if let Some(out) = &self.outcome {
            for (t, beta) in out.beta.iter().enumerate() {
                if !beta.is_empty() && beta.len() != map.q() {
                    return Err(CarError::param(
                        format!("outcome.beta[{t}]"),
                        format!("expected {} coefficients, got {}", map.q(), beta.len()),
                    ));
                }
            }
            if let Some(extra) = &out.extra {
                extra
                    .validate(p)
                    .map_err(|e| CarError::param("outcome.extra", e.to_string()))?;
            }
            if !out.errors.iter().all(ErrorLaw::valid) {
                return Err(CarError::param("outcome.errors", "invalid error law"));
            }
        }
        Ok(())
    }

    /// Annotations attached to experiment summaries.
    pub fn notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.design.gamma == 0.0 {
            let stratified = matches!(
                &self.design.feature_map,
                FeatureMapSpec::Discrete { weights, .. } if weights.stratum > 0.0
            );
            notes.push(if stratified {
                "gamma = 0 with a stratified discrete map: closed-form variances apply".to_string()
            } else {
                "gamma = 0: closed-form variances are only guaranteed for stratified discrete maps"
                    .to_string()
            });
        }
        notes
    }
}
