//! Allocation functions `l: R -> (0, 1)`.
//!
//! Every allocation function maps the damped imbalance signal
//! `<Lambda_{n-1}, phi(X_n)> / (n-1)^gamma` to the probability of
//! assigning treatment 1. The contract is `l(0) = rho`, `l` nonincreasing
//! and `l'(0) < 0`; the constant kind is the simple-randomization baseline
//! and is exempt from the slope condition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CarError, Result};
use crate::normal;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationKind {
    /// `([2 rho Phi(-x)] ∧ 1 + 1 - [2 (1-rho) Phi(x)] ∧ 1) / 2`
    TruncatedNormal,
    /// `Phi(-x + u_rho)`
    ShiftedNormal,
    /// `Phi(-x + u_{rho/2}) ∨ (rho - lambda x) ∧ Phi(-x + u_{(rho+1)/2})`
    ClampedLinear,
    /// Simple randomization, `l ≡ rho`.
    Constant,
}

impl AllocationKind {
    pub const ALL: [AllocationKind; 4] = [
        AllocationKind::TruncatedNormal,
        AllocationKind::ShiftedNormal,
        AllocationKind::ClampedLinear,
        AllocationKind::Constant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AllocationKind::TruncatedNormal => "truncated_normal",
            AllocationKind::ShiftedNormal => "shifted_normal",
            AllocationKind::ClampedLinear => "clamped_linear",
            AllocationKind::Constant => "constant",
        }
    }
}

impl fmt::Display for AllocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocationKind {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        AllocationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CarError::param("allocation.kind", format!("unknown kind `{s}`")))
    }
}

/// Serializable allocation function description.
///
/// `lambda` is the slope of the clamped-linear kind (default 1). When
/// `alpha` is set, the clamped-linear kind uses the constant clamps
/// `alpha * rho` and `1 - alpha * (1 - rho)` in place of the two
/// shifted normal curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationSpec {
    pub kind: AllocationKind,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl AllocationSpec {
    pub fn new(kind: AllocationKind, rho: f64) -> Self {
        Self {
            kind,
            rho,
            lambda: None,
            alpha: None,
        }
    }

    pub fn clamped_linear(rho: f64, lambda: f64) -> Self {
        Self {
            kind: AllocationKind::ClampedLinear,
            rho,
            lambda: Some(lambda),
            alpha: None,
        }
    }

    pub fn build(&self) -> Result<AllocationFunction> {
        AllocationFunction::new(*self)
    }
}

/// Parses the command-line form `kind:rho[:lambda]`.
impl FromStr for AllocationSpec {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind: AllocationKind = parts.next().unwrap_or_default().parse()?;
        let rho = parts
            .next()
            .ok_or_else(|| CarError::param("allocation.rho", "missing rho in `kind:rho[:lambda]`"))?
            .parse::<f64>()
            .map_err(|e| CarError::param("allocation.rho", e.to_string()))?;
        let lambda = parts
            .next()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| CarError::param("allocation.lambda", e.to_string()))
            })
            .transpose()?;
        if parts.next().is_some() {
            return Err(CarError::param(
                "allocation",
                "expected `kind:rho[:lambda]`",
            ));
        }
        Ok(Self {
            kind,
            rho,
            lambda,
            alpha: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    TruncatedNormal,
    ShiftedNormal { u_rho: f64 },
    ClampedLinear { lambda: f64, clamps: Clamps },
    Constant,
}

#[derive(Debug, Clone, Copy)]
enum Clamps {
    Normal { u_low: f64, u_high: f64 },
    Fixed { low: f64, high: f64 },
}

/// A validated allocation function.
#[derive(Debug, Clone, Copy)]
pub struct AllocationFunction {
    spec: AllocationSpec,
    rho: f64,
    rule: Rule,
}

impl AllocationFunction {
    pub fn new(spec: AllocationSpec) -> Result<Self> {
        let rho = spec.rho;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(CarError::param("rho", format!("must lie in (0, 1), got {rho}")));
        }
        let rule = match spec.kind {
            AllocationKind::TruncatedNormal => Rule::TruncatedNormal,
            AllocationKind::ShiftedNormal => Rule::ShiftedNormal {
                u_rho: normal::quantile(rho),
            },
            AllocationKind::ClampedLinear => {
                let lambda = spec.lambda.unwrap_or(DEFAULT_LAMBDA);
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(CarError::param(
                        "lambda",
                        format!("must be positive, got {lambda}"),
                    ));
                }
                let clamps = match spec.alpha {
                    None => Clamps::Normal {
                        u_low: normal::quantile(rho / 2.0),
                        u_high: normal::quantile((rho + 1.0) / 2.0),
                    },
                    Some(alpha) if alpha > 0.0 && alpha < 1.0 => Clamps::Fixed {
                        low: alpha * rho,
                        high: 1.0 - alpha * (1.0 - rho),
                    },
                    Some(alpha) => {
                        return Err(CarError::param(
                            "alpha",
                            format!("must lie in (0, 1), got {alpha}"),
                        ))
                    }
                };
                Rule::ClampedLinear { lambda, clamps }
            }
            AllocationKind::Constant => Rule::Constant,
        };
        Ok(Self { spec, rho, rule })
    }

    pub fn spec(&self) -> &AllocationSpec {
        &self.spec
    }

    pub fn kind(&self) -> AllocationKind {
        self.spec.kind
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `l(x)`; rejects NaN.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(CarError::InvalidInput(
                "allocation function evaluated at NaN".into(),
            ));
        }
        Ok(self.value(x))
    }

    /// `l(x)` without the NaN check.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let rho = self.rho;
        match self.rule {
            Rule::TruncatedNormal => {
                let low = (2.0 * rho * normal::cdf(-x)).min(1.0);
                let high = (2.0 * (1.0 - rho) * normal::cdf(x)).min(1.0);
                (low + 1.0 - high) / 2.0
            }
            Rule::ShiftedNormal { u_rho } => normal::cdf(-x + u_rho),
            Rule::ClampedLinear { lambda, clamps } => {
                let (low, high) = match clamps {
                    Clamps::Normal { u_low, u_high } => {
                        (normal::cdf(-x + u_low), normal::cdf(-x + u_high))
                    }
                    Clamps::Fixed { low, high } => (low, high),
                };
                (rho - lambda * x).max(low).min(high)
            }
            Rule::Constant => rho,
        }
    }

    /// Checks the allocation contract on `grid` and estimates `l'(0)` by a
    /// central difference with step `h`.
    pub fn check(&self, grid: &[f64], h: f64) -> Result<ValidationReport> {
        check_allocation(|x| self.value(x), self.rho, grid, h).map(|mut report| {
            report.baseline_exempt = self.kind() == AllocationKind::Constant;
            report
        })
    }
}

/// Outcome of [`check_allocation`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `|l(0) - rho|`
    pub zero_error: f64,
    /// Indices `i` with `l(grid[i+1]) > l(grid[i])`.
    pub monotonicity_violations: Vec<usize>,
    /// Grid points where `l` left the open unit interval.
    pub out_of_range: Vec<usize>,
    pub derivative_at_zero: f64,
    pub derivative_negative: bool,
    /// True for the simple-randomization baseline, which is allowed a flat slope.
    pub baseline_exempt: bool,
}

impl ValidationReport {
    pub fn passes(&self, zero_tol: f64) -> bool {
        self.zero_error <= zero_tol
            && self.monotonicity_violations.is_empty()
            && self.out_of_range.is_empty()
            && (self.derivative_negative || self.baseline_exempt)
    }
}

/// Validates an arbitrary allocation function against the contract.
pub fn check_allocation<F>(f: F, rho: f64, grid: &[f64], h: f64) -> Result<ValidationReport>
where
    F: Fn(f64) -> f64,
{
    if grid.is_empty() {
        return Err(CarError::param("grid", "must be nonempty"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(CarError::param("grid", "must be sorted"));
    }
    if !(h > 0.0) {
        return Err(CarError::param("h", "must be positive"));
    }
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let monotonicity_violations = values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, _)| i)
        .collect();
    let out_of_range = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| !(v > 0.0 && v < 1.0))
        .map(|(i, _)| i)
        .collect();
    let derivative_at_zero = (f(h) - f(-h)) / (2.0 * h);
    Ok(ValidationReport {
        zero_error: (f(0.0) - rho).abs(),
        monotonicity_violations,
        out_of_range,
        derivative_at_zero,
        derivative_negative: derivative_at_zero < 0.0,
        baseline_exempt: false,
    })
}

/// `n` equally spaced points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}
