//! Covariate feature maps `phi: R^p -> R^q`.
//!
//! Three kinds are supported:
//!
//! * `linear`: `(1, x_1, ..., x_p)` or `(x_1, ..., x_p)` without intercept.
//! * `discrete`: intercept, marginal level indicators and within-stratum
//!   indicators, each block scaled by the square root of its weight so
//!   that squared norms carry the weights themselves.
//! * `custom`: a list of expressions (serializable) or a Rust callback.
//!
//! Discrete covariates are passed as 0-based level indices stored in `f64`.
//! The discrete layout is fixed: `[sqrt(w_o)]`, then the marginal blocks
//! ordered by covariate and then by level, then the `prod m_l` strata in
//! row-major level order (the first covariate varies slowest). Zero-weight
//! blocks are kept, so `q = 1 + sum m_l + prod m_l` always.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CarError, Result};
use crate::expr::Expr;

fn default_true() -> bool {
    true
}

/// Weights of the discrete map: overall (`w_o`), per-covariate marginal
/// (`w_{m,l}`) and within-stratum (`w_s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteWeights {
    pub overall: f64,
    pub marginal: Vec<f64>,
    pub stratum: f64,
}

impl DiscreteWeights {
    pub fn uniform(p: usize, overall: f64, marginal: f64, stratum: f64) -> Self {
        Self {
            overall,
            marginal: vec![marginal; p],
            stratum,
        }
    }
}

/// Serializable description of a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMapSpec {
    Linear {
        p: usize,
        #[serde(default = "default_true")]
        intercept: bool,
    },
    Discrete {
        levels: Vec<usize>,
        weights: DiscreteWeights,
    },
    Custom {
        p: usize,
        features: Vec<Expr>,
    },
}

impl FeatureMapSpec {
    pub fn linear(p: usize) -> Self {
        FeatureMapSpec::Linear { p, intercept: true }
    }

    pub fn build(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.clone())
    }
}

/// Block layout of a discrete map.
#[derive(Debug, Clone)]
pub struct DiscreteLayout {
    pub levels: Vec<usize>,
    pub weights: DiscreteWeights,
    sqrt_overall: f64,
    sqrt_marginal: Vec<f64>,
    sqrt_stratum: f64,
    marginal_offsets: Vec<usize>,
    stratum_offset: usize,
    strides: Vec<usize>,
    n_strata: usize,
}

impl DiscreteLayout {
    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    pub fn marginal_offset(&self, covariate: usize) -> usize {
        self.marginal_offsets[covariate]
    }

    pub fn stratum_offset(&self) -> usize {
        self.stratum_offset
    }

    /// Row-major index of the stratum with the given level indices.
    pub fn stratum_index(&self, levels: &[usize]) -> usize {
        levels.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    /// Inverse of [`stratum_index`](Self::stratum_index).
    pub fn stratum_levels(&self, mut index: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|s| {
                let k = index / s;
                index %= s;
                k
            })
            .collect()
    }

    /// Validates `x` and returns its level indices.
    pub fn cell(&self, x: &[f64]) -> Result<Vec<usize>> {
        if x.len() != self.levels.len() {
            return Err(CarError::dim("covariates", self.levels.len(), x.len()));
        }
        x.iter()
            .zip(&self.levels)
            .enumerate()
            .map(|(index, (&value, &m))| {
                let k = value as usize;
                if value.fract() != 0.0 || value < 0.0 || k >= m {
                    Err(CarError::InvalidLevel {
                        index,
                        value,
                        levels: m,
                    })
                } else {
                    Ok(k)
                }
            })
            .collect()
    }
}

type FeatureFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Kind {
    Linear { intercept: bool },
    Discrete(DiscreteLayout),
    Exprs(Vec<Expr>),
    Callback(Arc<FeatureFn>),
}

/// A validated feature map. Immutable and cheap to clone.
#[derive(Clone)]
pub struct FeatureMap {
    spec: Option<FeatureMapSpec>,
    p: usize,
    q: usize,
    kind: Kind,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("p", &self.p)
            .field("q", &self.q)
            .field("spec", &self.spec)
            .finish()
    }
}

impl FeatureMap {
    pub fn new(spec: FeatureMapSpec) -> Result<Self> {
        let (p, q, kind) = match &spec {
            FeatureMapSpec::Linear { p, intercept } => {
                if *p == 0 {
                    return Err(CarError::param("feature_map.p", "must be at least 1"));
                }
                let q = if *intercept { p + 1 } else { *p };
                (*p, q, Kind::Linear { intercept: *intercept })
            }
            FeatureMapSpec::Discrete { levels, weights } => {
                let layout = build_discrete(levels, weights)?;
                let q = layout.stratum_offset + layout.n_strata;
                (levels.len(), q, Kind::Discrete(layout))
            }
            FeatureMapSpec::Custom { p, features } => {
                if *p == 0 {
                    return Err(CarError::param("feature_map.p", "must be at least 1"));
                }
                if features.is_empty() {
                    return Err(CarError::param(
                        "feature_map.features",
                        "custom map needs at least one feature",
                    ));
                }
                for f in features {
                    f.validate(*p)?;
                }
                (*p, features.len(), Kind::Exprs(features.clone()))
            }
        };
        Ok(Self {
            spec: Some(spec),
            p,
            q,
            kind,
        })
    }

    /// A custom map backed by a callback that fills a buffer of length `q`.
    /// Such maps cannot be serialized.
    pub fn from_fn<F>(p: usize, q: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if p == 0 || q == 0 {
            return Err(CarError::param("feature_map", "p and q must be positive"));
        }
        Ok(Self {
            spec: None,
            p,
            q,
            kind: Kind::Callback(Arc::new(f)),
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn spec(&self) -> Option<&FeatureMapSpec> {
        self.spec.as_ref()
    }

    pub fn discrete_layout(&self) -> Option<&DiscreteLayout> {
        match &self.kind {
            Kind::Discrete(layout) => Some(layout),
            _ => None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.q];
        self.apply_into(x, &mut out)?;
        Ok(out)
    }

    /// Writes `phi(x)` into `out` (length `q`).
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.p {
            return Err(CarError::dim("covariates", self.p, x.len()));
        }
        if out.len() != self.q {
            return Err(CarError::dim("feature buffer", self.q, out.len()));
        }
        match &self.kind {
            Kind::Linear { intercept } => {
                if *intercept {
                    out[0] = 1.0;
                    out[1..].copy_from_slice(x);
                } else {
                    out.copy_from_slice(x);
                }
            }
            Kind::Discrete(layout) => {
                let cell = layout.cell(x)?;
                out.fill(0.0);
                out[0] = layout.sqrt_overall;
                for (l, &k) in cell.iter().enumerate() {
                    out[layout.marginal_offsets[l] + k] = layout.sqrt_marginal[l];
                }
                out[layout.stratum_offset + layout.stratum_index(&cell)] = layout.sqrt_stratum;
            }
            Kind::Exprs(features) => {
                for (o, f) in out.iter_mut().zip(features) {
                    *o = f.eval(x);
                }
            }
            Kind::Callback(f) => f(x, out),
        }
        Ok(())
    }
}

fn build_discrete(levels: &[usize], weights: &DiscreteWeights) -> Result<DiscreteLayout> {
    if levels.is_empty() {
        return Err(CarError::param("feature_map.levels", "p must be at least 1"));
    }
    if let Some(l) = levels.iter().position(|&m| m == 0) {
        return Err(CarError::param(
            "feature_map.levels",
            format!("covariate {l} has no levels"),
        ));
    }
    if weights.marginal.len() != levels.len() {
        return Err(CarError::param(
            "feature_map.weights.marginal",
            format!(
                "expected {} marginal weights, got {}",
                levels.len(),
                weights.marginal.len()
            ),
        ));
    }
    let all = std::iter::once(weights.overall)
        .chain(weights.marginal.iter().copied())
        .chain(std::iter::once(weights.stratum));
    let mut any_positive = false;
    for w in all {
        if !w.is_finite() || w < 0.0 {
            return Err(CarError::param(
                "feature_map.weights",
                "weights must be finite and nonnegative",
            ));
        }
        any_positive |= w > 0.0;
    }
    if !any_positive {
        return Err(CarError::param(
            "feature_map.weights",
            "at least one weight must be positive",
        ));
    }

    let mut marginal_offsets = Vec::with_capacity(levels.len());
    let mut offset = 1;
    for &m in levels {
        marginal_offsets.push(offset);
        offset += m;
    }
    let n_strata = levels
        .iter()
        .try_fold(1usize, |acc, &m| acc.checked_mul(m))
        .ok_or_else(|| CarError::param("feature_map.levels", "too many strata"))?;
    let mut strides = vec![1; levels.len()];
    for l in (0..levels.len().saturating_sub(1)).rev() {
        strides[l] = strides[l + 1] * levels[l + 1];
    }
    Ok(DiscreteLayout {
        levels: levels.to_vec(),
        weights: weights.clone(),
        sqrt_overall: weights.overall.sqrt(),
        sqrt_marginal: weights.marginal.iter().map(|w| w.sqrt()).collect(),
        sqrt_stratum: weights.stratum.sqrt(),
        marginal_offsets,
        stratum_offset: offset,
        strides,
        n_strata,
    })
}

/// `c1 ∨ sqrt(sum_sq_norms / count) ∧ c2`, the running feature scale used
/// to make the allocation rule invariant to the units of `phi`.
pub fn scale_normalizer(sum_sq_norms: f64, count: usize, c1: f64, c2: f64) -> Result<f64> {
    if count == 0 {
        return Err(CarError::param(
            "count",
            "scale normalizer needs at least one previous unit",
        ));
    }
    if !(c1 > 0.0 && c1 < c2) {
        return Err(CarError::param("c1", "need 0 < c1 < c2"));
    }
    Ok((sum_sq_norms / count as f64).sqrt().max(c1).min(c2))
}
