//! A small closed expression language over covariates.
//!
//! Used for unspecified features `m(X)`, outcome model terms and custom
//! feature maps. Expressions are plain data so scenarios stay
//! serializable; the set is limited to affine combinations, integer
//! powers up to degree 4, indicators and products.

use serde::{Deserialize, Serialize};

use crate::error::{CarError, Result};

pub const MAX_DEGREE: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
}

impl Comparison {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparison::Gt => lhs > rhs,
            Comparison::Ge => lhs >= rhs,
            Comparison::Lt => lhs < rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Eq => lhs == rhs,
        }
    }
}

/// Expression tree. JSON form is tagged by `op`, e.g.
/// `{"op": "pow", "base": {"op": "var", "index": 0}, "exp": 2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Expr {
    Const { value: f64 },
    Var { index: usize },
    Scale { factor: f64, expr: Box<Expr> },
    Sum { terms: Vec<Expr> },
    Product { factors: Vec<Expr> },
    Pow { base: Box<Expr>, exp: u32 },
    Indicator { expr: Box<Expr>, cmp: Comparison, threshold: f64 },
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const { value }
    }

    pub fn var(index: usize) -> Self {
        Expr::Var { index }
    }

    pub fn pow(base: Expr, exp: u32) -> Self {
        Expr::Pow {
            base: Box::new(base),
            exp,
        }
    }

    pub fn scale(factor: f64, expr: Expr) -> Self {
        Expr::Scale {
            factor,
            expr: Box::new(expr),
        }
    }

    pub fn indicator(expr: Expr, cmp: Comparison, threshold: f64) -> Self {
        Expr::Indicator {
            expr: Box::new(expr),
            cmp,
            threshold,
        }
    }

    pub fn sum(terms: Vec<Expr>) -> Self {
        Expr::Sum { terms }
    }

    pub fn product(factors: Vec<Expr>) -> Self {
        Expr::Product { factors }
    }

    /// Checks variable references against the covariate dimension `p`
    /// and the degree cap.
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            Expr::Const { value } => {
                if value.is_finite() {
                    Ok(())
                } else {
                    Err(CarError::InvalidInput("non-finite constant".into()))
                }
            }
            Expr::Var { index } => {
                if *index < p {
                    Ok(())
                } else {
                    Err(CarError::InvalidInput(format!(
                        "expression references covariate {index} but only {p} are defined"
                    )))
                }
            }
            Expr::Scale { expr, .. } => expr.validate(p),
            Expr::Sum { terms } => terms.iter().try_for_each(|t| t.validate(p)),
            Expr::Product { factors } => factors.iter().try_for_each(|f| f.validate(p)),
            Expr::Pow { base, exp } => {
                if *exp > MAX_DEGREE {
                    return Err(CarError::InvalidInput(format!(
                        "power {exp} exceeds the maximum degree {MAX_DEGREE}"
                    )));
                }
                base.validate(p)
            }
            Expr::Indicator { expr, .. } => expr.validate(p),
        }
    }

    /// Evaluates at covariate vector `x`. Call `validate` first; an
    /// out-of-range variable evaluates to NaN.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const { value } => *value,
            Expr::Var { index } => x.get(*index).copied().unwrap_or(f64::NAN),
            Expr::Scale { factor, expr } => factor * expr.eval(x),
            Expr::Sum { terms } => terms.iter().map(|t| t.eval(x)).sum(),
            Expr::Product { factors } => factors.iter().map(|f| f.eval(x)).product(),
            Expr::Pow { base, exp } => base.eval(x).powi(*exp as i32),
            Expr::Indicator {
                expr,
                cmp,
                threshold,
            } => {
                if cmp.holds(expr.eval(x), *threshold) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}
