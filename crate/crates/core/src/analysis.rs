//! Projections, closed-form design variances and two-sample tests.
//!
//! Least squares go through a singular value decomposition. Singular
//! values below `1e-10` times the largest are treated as zero, giving the
//! minimum-norm solution on rank-deficient feature matrices; fitted values
//! then depend only on the column span.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{Arm, UnitRecord};
use crate::error::{CarError, Result};
use crate::normal;

pub const RANK_TOLERANCE: f64 = 1e-10;

/// Stacks feature rows into an `n x q` matrix.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let q = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != q) {
        return Err(CarError::dim("feature row", q, bad.len()));
    }
    Ok(DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]))
}

/// Least-squares projection of a sample onto the span of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Numerical rank of the feature matrix.
    pub rank: usize,
}

impl ProjectionFit {
    pub fn mean_squared_residual(&self) -> f64 {
        mean_square(&self.residuals)
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank < self.coefficients.len()
    }
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64
}

/// Projects `z` onto the columns of `phi` (`n x q`).
pub fn project(z: &[f64], phi: &DMatrix<f64>) -> Result<ProjectionFit> {
    if z.is_empty() {
        return Err(CarError::InvalidInput("projection of an empty sample".into()));
    }
    if phi.nrows() != z.len() {
        return Err(CarError::dim("feature matrix rows", z.len(), phi.nrows()));
    }
    let q = phi.ncols();
    let b = DVector::from_column_slice(z);
    let (coef, rank) = if q == 0 {
        (DVector::zeros(0), 0)
    } else {
        let svd = phi.clone().svd(true, true);
        let largest = svd.singular_values.max();
        if largest <= 0.0 {
            (DVector::zeros(q), 0)
        } else {
            let eps = RANK_TOLERANCE * largest;
            let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
            let coef = svd
                .solve(&b, eps)
                .map_err(|e| CarError::InvalidInput(e.to_string()))?;
            (coef, rank)
        }
    };
    let fitted = if q == 0 {
        DVector::zeros(z.len())
    } else {
        phi * &coef
    };
    let residuals = &b - &fitted;
    Ok(ProjectionFit {
        coefficients: coef.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        residuals: residuals.iter().copied().collect(),
        rank,
    })
}

/// `rho (1 - rho) mean((Z - Pj[Z|phi])^2)`, the sample version of the
/// asymptotic variance of `sum (T_i - rho) Z_i / sqrt(n)`.
pub fn design_variance(z: &[f64], phi: &DMatrix<f64>, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(rho * (1.0 - rho) * project(z, phi)?.mean_squared_residual())
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(CarError::param("rho", format!("must lie in (0, 1), got {rho}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CarError::param("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Classical,
    Adjusted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    /// `Ybar_1 - Ybar_2`
    pub tau_hat: f64,
    pub means: [f64; 2],
    /// Per-arm variance estimates plugged into the denominator.
    pub variances: [f64; 2],
    pub group_sizes: [usize; 2],
    pub alpha: f64,
    pub critical_value: f64,
    pub reject: bool,
    /// Two-sided p-value under N(0, 1).
    pub p_value: f64,
}

struct Groups {
    sizes: [usize; 2],
    means: [f64; 2],
    variances: [f64; 2],
}

fn arm_index(arm: Arm) -> usize {
    match arm {
        Arm::Treatment1 => 0,
        Arm::Treatment2 => 1,
    }
}

fn groups(y: &[f64], arms: &[Arm]) -> Result<Groups> {
    if y.len() != arms.len() {
        return Err(CarError::dim("assignments", y.len(), arms.len()));
    }
    let mut sizes = [0usize; 2];
    let mut sums = [0.0; 2];
    for (&v, &a) in y.iter().zip(arms) {
        let t = arm_index(a);
        sizes[t] += 1;
        sums[t] += v;
    }
    for (t, &size) in sizes.iter().enumerate() {
        if size < 2 {
            return Err(CarError::InvalidInput(format!(
                "arm {} has {size} observations, need at least 2",
                t + 1
            )));
        }
    }
    let means = [sums[0] / sizes[0] as f64, sums[1] / sizes[1] as f64];
    let mut ss = [0.0; 2];
    for (&v, &a) in y.iter().zip(arms) {
        let t = arm_index(a);
        ss[t] += (v - means[t]).powi(2);
    }
    Ok(Groups {
        sizes,
        means,
        variances: [
            ss[0] / (sizes[0] - 1) as f64,
            ss[1] / (sizes[1] - 1) as f64,
        ],
    })
}

fn finish_test(kind: TestKind, g: &Groups, variances: [f64; 2], alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let se_sq = variances[0] / g.sizes[0] as f64 + variances[1] / g.sizes[1] as f64;
    if !(se_sq > 0.0) {
        return Err(CarError::DegenerateVariance(format!(
            "standard error of the difference is {se_sq}"
        )));
    }
    let tau_hat = g.means[0] - g.means[1];
    let statistic = tau_hat / se_sq.sqrt();
    let critical_value = normal::quantile(1.0 - alpha / 2.0);
    Ok(TestResult {
        kind,
        statistic,
        tau_hat,
        means: g.means,
        variances,
        group_sizes: g.sizes,
        alpha,
        critical_value,
        reject: statistic.abs() >= critical_value,
        p_value: 2.0 * normal::sf(statistic.abs()),
    })
}

/// Unpooled two-sample statistic with `N_{n,t} - 1` variance divisors.
pub fn classical_test(y: &[f64], arms: &[Arm], alpha: f64) -> Result<TestResult> {
    let g = groups(y, arms)?;
    let variances = g.variances;
    finish_test(TestKind::Classical, &g, variances, alpha)
}

/// Two-sample statistic with caller-supplied per-arm variances.
pub fn test_with_variances(
    y: &[f64],
    arms: &[Arm],
    variances: [f64; 2],
    alpha: f64,
) -> Result<TestResult> {
    let g = groups(y, arms)?;
    finish_test(TestKind::Adjusted, &g, variances, alpha)
}

/// Per-arm regression output behind the adjusted variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedVariances {
    /// Estimates of `sigma~_t^2`.
    pub sigma_tilde_sq: [f64; 2],
    /// Within-arm regression coefficients `alpha_hat_{n,t}`.
    pub coefficients: [Vec<f64>; 2],
    /// `sum zeta^2 / (N_{n,t} - 1)`
    pub residual_variance: [f64; 2],
    /// `rho (1 - rho) / (n - 2) * sum_i (phi_i (alpha_1 - alpha_2))^2`
    pub heterogeneity_term: f64,
    /// Mean of `(phi_i (alpha_1 / rho + alpha_2 / (1 - rho)))^2`: a plug-in
    /// estimate of the projection variance behind the classical test's
    /// conservativeness. Not part of the adjusted statistic.
    pub sigma_pj_sq: f64,
    /// Set when a within-arm design was singular and the minimum-norm fit
    /// was used.
    pub rank_deficient: bool,
}

/// Regression-based estimates of `sigma~_{n,t}^2`.
///
/// Within each arm the centered outcomes `Y_i - Ybar_{n,t}` are regressed on
/// `phi(X_i)`. The estimate is the residual variance with divisor
/// `N_{n,t} - 1` plus `rho (1 - rho) / (n - 2)` times the sum over all `n`
/// units of `(phi(X_i) (alpha_hat_1 - alpha_hat_2))^2`.
pub fn adjusted_variances(
    y: &[f64],
    arms: &[Arm],
    phi: &DMatrix<f64>,
    rho: f64,
) -> Result<AdjustedVariances> {
    check_rho(rho)?;
    let g = groups(y, arms)?;
    let n = y.len();
    if phi.nrows() != n {
        return Err(CarError::dim("feature matrix rows", n, phi.nrows()));
    }
    if n <= 2 {
        return Err(CarError::InvalidInput("need more than 2 units".into()));
    }
    let q = phi.ncols();
    let mut coefficients: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut residual_variance = [0.0; 2];
    let mut rank_deficient = false;
    for t in 0..2 {
        let rows: Vec<usize> = (0..n).filter(|&i| arm_index(arms[i]) == t).collect();
        let design = DMatrix::from_fn(rows.len(), q, |r, j| phi[(rows[r], j)]);
        let centered: Vec<f64> = rows.iter().map(|&i| y[i] - g.means[t]).collect();
        let fit = project(&centered, &design)?;
        rank_deficient |= fit.rank_deficient();
        residual_variance[t] =
            fit.residuals.iter().map(|r| r * r).sum::<f64>() / (g.sizes[t] - 1) as f64;
        coefficients[t] = fit.coefficients;
    }
    let diff = DVector::from_iterator(
        q,
        coefficients[0].iter().zip(&coefficients[1]).map(|(a, b)| a - b),
    );
    let scaled = DVector::from_iterator(
        q,
        coefficients[0]
            .iter()
            .zip(&coefficients[1])
            .map(|(a, b)| a / rho + b / (1.0 - rho)),
    );
    let het = phi * &diff;
    let pj = phi * &scaled;
    let heterogeneity_term = rho * (1.0 - rho) / (n - 2) as f64 * het.norm_squared();
    Ok(AdjustedVariances {
        sigma_tilde_sq: [
            residual_variance[0] + heterogeneity_term,
            residual_variance[1] + heterogeneity_term,
        ],
        coefficients,
        residual_variance,
        heterogeneity_term,
        sigma_pj_sq: pj.norm_squared() / n as f64,
        rank_deficient,
    })
}

/// The classical statistic with `sigma~_{n,t}^2` in place of the sample
/// variances.
pub fn adjusted_test(
    y: &[f64],
    arms: &[Arm],
    phi: &DMatrix<f64>,
    rho: f64,
    alpha: f64,
) -> Result<TestResult> {
    let adj = adjusted_variances(y, arms, phi, rho)?;
    let g = groups(y, arms)?;
    finish_test(TestKind::Adjusted, &g, adj.sigma_tilde_sq, alpha)
}

/// Population second moments of the outcome errors `e_t = Y(t) - mu_t`.
///
/// `pj_gram[s][t] = E(Pj[e_s|phi] Pj[e_t|phi])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationMoments {
    pub sigma_sq: [f64; 2],
    pub pj_gram: [[f64; 2]; 2],
}

impl PopulationMoments {
    /// Estimates the moments from a large iid sample of both potential
    /// outcomes and the features.
    pub fn from_sample(y1: &[f64], y2: &[f64], phi: &DMatrix<f64>) -> Result<Self> {
        if y1.len() != y2.len() {
            return Err(CarError::dim("potential outcomes", y1.len(), y2.len()));
        }
        let center = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| x - m).collect::<Vec<_>>()
        };
        let e1 = center(y1);
        let e2 = center(y2);
        let f1 = project(&e1, phi)?.fitted;
        let f2 = project(&e2, phi)?.fitted;
        let n = e1.len() as f64;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        let cross = dot(&f1, &f2);
        Ok(Self {
            sigma_sq: [dot(&e1, &e1), dot(&e2, &e2)],
            pj_gram: [[dot(&f1, &f1), cross], [cross, dot(&f2, &f2)]],
        })
    }
}

/// Closed-form asymptotic variances of the difference in means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalVariances {
    /// `sigma_tau^2`, asymptotic variance of `sqrt(n) (Ybar_1 - Ybar_2 - tau)`.
    pub sigma_tau_sq: f64,
    /// `sigma_e^2 = sigma_1^2 / rho + sigma_2^2 / (1 - rho)`
    pub sigma_e_sq: f64,
    pub sigma_pj_sq: f64,
    /// `sigma~_t^2`, t = 1, 2
    pub sigma_tilde_sq: [f64; 2],
    /// `sigma_tau^2 / sigma_e^2`, the null variance of the classical statistic.
    pub sigma_test_sq: f64,
}

impl TheoreticalVariances {
    /// The second expression for `sigma_tau^2`, through `sigma~_t^2`.
    pub fn sigma_tau_sq_from_tilde(&self, rho: f64) -> f64 {
        self.sigma_tilde_sq[0] / rho + self.sigma_tilde_sq[1] / (1.0 - rho)
    }
}

pub fn theoretical_variances(m: &PopulationMoments, rho: f64) -> Result<TheoreticalVariances> {
    check_rho(rho)?;
    let [s1, s2] = m.sigma_sq;
    let [[a11, a12], [a21, a22]] = m.pj_gram;
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(CarError::param("sigma_sq", "variances must be positive"));
    }
    let tol = 1e-12 * (1.0 + s1.max(s2));
    if (a12 - a21).abs() > tol || a11 < 0.0 || a22 < 0.0 || a12 * a12 > a11 * a22 + tol {
        return Err(CarError::param(
            "pj_gram",
            "projection moments must form a positive semidefinite matrix",
        ));
    }
    if a11 > s1 + tol || a22 > s2 + tol {
        return Err(CarError::param(
            "pj_gram",
            "projection second moment exceeds the outcome variance",
        ));
    }
    let r = rho;
    let sigma_e_sq = s1 / r + s2 / (1.0 - r);
    let sigma_pj_sq = a11 / (r * r) + a22 / ((1.0 - r) * (1.0 - r)) + 2.0 * a12 / (r * (1.0 - r));
    let sigma_tau_sq = sigma_e_sq - r * (1.0 - r) * sigma_pj_sq;
    if sigma_tau_sq < 0.0 {
        return Err(CarError::param(
            "pj_gram",
            format!("moments imply a negative sigma_tau^2 = {sigma_tau_sq}"),
        ));
    }
    let het = r * (1.0 - r) * (a11 + a22 - 2.0 * a12);
    Ok(TheoreticalVariances {
        sigma_tau_sq,
        sigma_e_sq,
        sigma_pj_sq,
        sigma_tilde_sq: [s1 - a11 + het, s2 - a22 + het],
        sigma_test_sq: sigma_tau_sq / sigma_e_sq,
    })
}

/// Noncentrality convention for local-alternative power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerVariant {
    /// Noncentrality `|delta| / (2 sigma_tau)`.
    HalfShift,
    /// Noncentrality `|delta| / sigma_tau`, which follows from
    /// `sqrt(n)(Ybar_1 - Ybar_2 - tau) -> N(0, sigma_tau^2)` for any rho.
    Derived,
}

/// Limiting power of the classical test under `tau = delta / sqrt(n)`:
/// `P(|shift + N(0,1)| >= u_{1-alpha/2} sigma_e / sigma_tau)`.
///
/// The adjusted test's power is the same expression with
/// `sigma_e = sigma_tau`.
pub fn asymptotic_power(
    delta: f64,
    sigma_e: f64,
    sigma_tau: f64,
    alpha: f64,
    variant: PowerVariant,
) -> Result<f64> {
    check_alpha(alpha)?;
    if !(sigma_e > 0.0 && sigma_tau > 0.0) {
        return Err(CarError::param("sigma", "standard deviations must be positive"));
    }
    let shift = match variant {
        PowerVariant::HalfShift => delta.abs() / (2.0 * sigma_tau),
        PowerVariant::Derived => delta.abs() / sigma_tau,
    };
    let threshold = normal::quantile(1.0 - alpha / 2.0) * sigma_e / sigma_tau;
    Ok(normal::two_sided_exceedance(shift, threshold))
}

/// Both tests computed from a trial log and outcomes in log order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogAnalysis {
    pub classical: TestResult,
    pub adjusted: TestResult,
    pub variances: AdjustedVariances,
}

pub fn analyze_log(records: &[UnitRecord], y: &[f64], rho: f64, alpha: f64) -> Result<LogAnalysis> {
    if records.len() != y.len() {
        return Err(CarError::dim("outcomes", records.len(), y.len()));
    }
    let arms: Vec<Arm> = records.iter().map(|r| r.arm).collect();
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.phi.clone()).collect();
    let phi = feature_matrix(&rows)?;
    let variances = adjusted_variances(y, &arms, &phi, rho)?;
    let classical = classical_test(y, &arms, alpha)?;
    let adjusted = test_with_variances(y, &arms, variances.sigma_tilde_sq, alpha)?;
    Ok(LogAnalysis {
        classical,
        adjusted,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const T1: Arm = Arm::Treatment1;
    const T2: Arm = Arm::Treatment2;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn intercept_and(x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] })
    }

    #[test]
    fn exact_linear_projection() {
        let x = normals(200, 1);
        let z: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let fit = project(&z, &intercept_and(&x)).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-10);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-10));
        assert_eq!(fit.rank, 2);
    }

    // Population projection of X^2 on (1, X) is (1, 0) since E X^2 = 1 and
    // E X^3 = 0; E (X^2 - 1)^2 = 2.
    #[test]
    fn quadratic_projection_matches_gaussian_moments() {
        let x = normals(100_000, 2);
        let z: Vec<f64> = x.iter().map(|v| v * v).collect();
        let phi = intercept_and(&x);
        let fit = project(&z, &phi).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 0.02);
        assert!(fit.coefficients[1].abs() < 0.02);
        let dv = design_variance(&z, &phi, 0.5).unwrap();
        assert!((dv - 0.5).abs() < 0.02 * 0.5 * 2.0, "design variance {dv}");
    }

    #[test]
    fn duplicated_column_keeps_fitted_values() {
        let x = normals(50, 3);
        let z: Vec<f64> = x.iter().map(|v| v.sin() + 0.5).collect();
        let base = project(&z, &intercept_and(&x)).unwrap();
        let dup = DMatrix::from_fn(50, 3, |i, j| if j == 0 { 1.0 } else { x[i] });
        let fit = project(&z, &dup).unwrap();
        assert_eq!(fit.rank, 2);
        assert!(fit.rank_deficient());
        for (a, b) in fit.fitted.iter().zip(&base.fitted) {
            assert!((a - b).abs() < 1e-9);
        }
        // minimum norm splits the duplicated coefficient evenly
        assert!((fit.coefficients[1] - fit.coefficients[2]).abs() < 1e-9);
    }

    #[test]
    fn design_variance_boundary_cases() {
        let x = normals(500, 4);
        let phi = intercept_and(&x);
        let in_span: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(design_variance(&in_span, &phi, 0.3).unwrap() < 1e-20);

        // Residualize an arbitrary vector so it is exactly orthogonal to phi.
        let raw: Vec<f64> = x.iter().map(|v| v * v * v.signum() + 0.1).collect();
        let orth = project(&raw, &phi).unwrap().residuals;
        let ms = orth.iter().map(|v| v * v).sum::<f64>() / orth.len() as f64;
        let dv = design_variance(&orth, &phi, 0.3).unwrap();
        assert!((dv - 0.21 * ms).abs() < 1e-12);
        assert!(project(&[], &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn classical_test_arithmetic() {
        let y = [1.0, 3.0, 0.0, 2.0];
        let arms = [T1, T1, T2, T2];
        let r = classical_test(&y, &arms, 0.05).unwrap();
        assert_eq!(r.tau_hat, 1.0);
        assert_eq!(r.variances, [2.0, 2.0]);
        assert!((r.statistic - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(!r.reject);

        let same = classical_test(&[1.0, 3.0, 1.0, 3.0], &arms, 0.05).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert!((same.p_value - 1.0).abs() < 1e-15);

        let supplied = test_with_variances(&y, &arms, [1.0, 1.0], 0.05).unwrap();
        assert!((supplied.statistic - 1.0).abs() < 1e-15);
    }

    #[test]
    fn classical_test_unequal_sizes() {
        let mut y = vec![0.5, 1.5];
        let mut arms = vec![T1, T1];
        for i in 0..5000 {
            y.push((i % 7) as f64);
            arms.push(T2);
        }
        let r = classical_test(&y, &arms, 0.05).unwrap();
        assert!(r.statistic.is_finite());
        assert_eq!(r.group_sizes, [2, 5000]);
    }

    #[test]
    fn test_errors() {
        assert!(classical_test(&[1.0, 2.0, 3.0], &[T1, T2, T2], 0.05).is_err());
        assert!(matches!(
            classical_test(&[1.0, 1.0, 2.0, 2.0], &[T1, T1, T2, T2], 0.05),
            Err(CarError::DegenerateVariance(_))
        ));
        assert!(classical_test(&[1.0, 3.0, 0.0, 2.0], &[T1, T1, T2, T2], 1.5).is_err());
    }

    #[test]
    fn rejection_matches_critical_value() {
        let y = [5.0, 5.5, 6.0, 0.0, 0.2, 0.4];
        let arms = [T1, T1, T1, T2, T2, T2];
        let r = classical_test(&y, &arms, 0.05).unwrap();
        assert!(r.reject);
        assert!((r.critical_value - 1.959_963_984_540_054).abs() < 1e-12);
        assert!(r.p_value < 0.05);
    }

    fn simulate_arms(n: usize, seed: u64) -> Vec<Arm> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| if rng.random::<f64>() < 0.5 { T1 } else { T2 })
            .collect()
    }

    #[test]
    fn adjusted_variances_without_signal() {
        let n = 4000;
        let x = normals(n, 5);
        let eps = normals(n, 6);
        let arms = simulate_arms(n, 7);
        let y: Vec<f64> = eps.iter().map(|e| 1.0 + e).collect();
        let phi = intercept_and(&x);
        let adj = adjusted_variances(&y, &arms, &phi, 0.5).unwrap();
        let classical = classical_test(&y, &arms, 0.05).unwrap();
        for t in 0..2 {
            let rel = adj.sigma_tilde_sq[t] / classical.variances[t] - 1.0;
            assert!(rel.abs() < 0.01, "arm {t}: {rel}");
        }
        assert!(adj.heterogeneity_term < 0.01);
    }

    #[test]
    fn adjusted_variances_common_slope() {
        let n = 5000;
        let x = normals(n, 8);
        let eps = normals(n, 9);
        let arms = simulate_arms(n, 10);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mu = if arms[i] == T1 { 1.0 } else { 0.0 };
                mu + 3.0 * x[i] + eps[i]
            })
            .collect();
        let adj = adjusted_variances(&y, &arms, &intercept_and(&x), 0.5).unwrap();
        for v in adj.sigma_tilde_sq {
            assert!((v - 1.0).abs() < 0.05, "{v}");
        }
        assert!((adj.coefficients[0][1] - 3.0).abs() < 0.05);
    }

    // Y(1) = 2X + e, Y(2) = -X + e: sigma~_t^2 -> 1 + 0.25 * E(3X)^2 = 3.25
    #[test]
    fn adjusted_variances_heterogeneous_slopes() {
        let n = 20_000;
        let x = normals(n, 11);
        let eps = normals(n, 12);
        let arms = simulate_arms(n, 13);
        let y: Vec<f64> = (0..n)
            .map(|i| if arms[i] == T1 { 2.0 * x[i] } else { -x[i] } + eps[i])
            .collect();
        let adj = adjusted_variances(&y, &arms, &intercept_and(&x), 0.5).unwrap();
        for v in adj.sigma_tilde_sq {
            assert!((v - 3.25).abs() < 0.1, "{v}");
        }
    }

    #[test]
    fn adjusted_variances_flags_singular_design() {
        let x = normals(40, 14);
        let phi = DMatrix::from_fn(40, 3, |i, j| if j == 0 { 1.0 } else { x[i] });
        let y = normals(40, 15);
        let adj = adjusted_variances(&y, &simulate_arms(40, 16), &phi, 0.5).unwrap();
        assert!(adj.rank_deficient);
    }

    #[test]
    fn theoretical_variance_plug_in() {
        let none = theoretical_variances(
            &PopulationMoments {
                sigma_sq: [1.0, 2.0],
                pj_gram: [[0.0; 2]; 2],
            },
            0.4,
        )
        .unwrap();
        assert_eq!(none.sigma_tau_sq, none.sigma_e_sq);
        assert_eq!(none.sigma_test_sq, 1.0);

        let v = theoretical_variances(
            &PopulationMoments {
                sigma_sq: [1.0, 1.0],
                pj_gram: [[0.25, 0.25], [0.25, 0.25]],
            },
            0.5,
        )
        .unwrap();
        assert!((v.sigma_pj_sq - 4.0).abs() < 1e-15);
        assert!((v.sigma_tau_sq - 3.0).abs() < 1e-15);
        assert!((v.sigma_tau_sq_from_tilde(0.5) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn theoretical_variance_rejects_inconsistent_moments() {
        let bad = PopulationMoments {
            sigma_sq: [1.0, 1.0],
            pj_gram: [[2.0, 0.0], [0.0, 0.5]],
        };
        assert!(theoretical_variances(&bad, 0.5).is_err());
        let not_psd = PopulationMoments {
            sigma_sq: [1.0, 1.0],
            pj_gram: [[0.1, 0.5], [0.5, 0.1]],
        };
        assert!(theoretical_variances(&not_psd, 0.5).is_err());
    }

    #[test]
    fn power_limits() {
        let size = asymptotic_power(0.0, 2.0, 2.0, 0.05, PowerVariant::Derived).unwrap();
        assert!((size - 0.05).abs() < 1e-12);
        let conservative = asymptotic_power(0.0, 3.0, 2.0, 0.05, PowerVariant::Derived).unwrap();
        assert!(conservative < 0.05);
        let p = asymptotic_power(3.0, 2.0, 2.0, 0.05, PowerVariant::Derived).unwrap();
        let u = normal::quantile(0.975);
        assert!((p - (normal::cdf(1.5 - u) + normal::cdf(-1.5 - u))).abs() < 1e-15);
        let display = asymptotic_power(3.0, 2.0, 2.0, 0.05, PowerVariant::HalfShift).unwrap();
        assert!(display < p);
        assert!(asymptotic_power(1.0, 0.0, 1.0, 0.05, PowerVariant::Derived).is_err());
    }

    #[test]
    fn population_moments_from_sample() {
        // Y(1) = Y(2) = 3X + e at rho = 0.5: sigma_e^2 = 40, sigma_tau^2 = 4
        let n = 50_000;
        let x = normals(n, 17);
        let e1 = normals(n, 18);
        let e2 = normals(n, 19);
        let y1: Vec<f64> = (0..n).map(|i| 3.0 * x[i] + e1[i]).collect();
        let y2: Vec<f64> = (0..n).map(|i| 3.0 * x[i] + e2[i]).collect();
        let m = PopulationMoments::from_sample(&y1, &y2, &intercept_and(&x)).unwrap();
        let v = theoretical_variances(&m, 0.5).unwrap();
        assert!((v.sigma_e_sq / 40.0 - 1.0).abs() < 0.03);
        assert!((v.sigma_tau_sq / 4.0 - 1.0).abs() < 0.05);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sigma_tau_expressions_agree(
                s1 in 0.1f64..10.0, s2 in 0.1f64..10.0,
                f1 in 0.0f64..1.0, f2 in 0.0f64..1.0, c in -1.0f64..1.0,
                rho in 0.05f64..0.95,
            ) {
                let a11 = f1 * s1;
                let a22 = f2 * s2;
                let a12 = c * (a11 * a22).sqrt();
                let m = PopulationMoments { sigma_sq: [s1, s2], pj_gram: [[a11, a12], [a12, a22]] };
                if let Ok(v) = theoretical_variances(&m, rho) {
                    let other = v.sigma_tau_sq_from_tilde(rho);
                    prop_assert!((v.sigma_tau_sq - other).abs() <= 1e-12 * (1.0 + other.abs()));
                    prop_assert!(v.sigma_test_sq <= 1.0 + 1e-12);
                    prop_assert!(v.sigma_tau_sq <= v.sigma_e_sq + 1e-12);
                }
            }

            #[test]
            fn projection_properties(seed in 0u64..1000, n in 5usize..60) {
                let x = normals(n, seed);
                let z = normals(n, seed + 10_000);
                let phi = intercept_and(&x);
                let fit = project(&z, &phi).unwrap();
                // residuals orthogonal to every column
                for j in 0..2 {
                    let dot: f64 = (0..n).map(|i| phi[(i, j)] * fit.residuals[i]).sum();
                    prop_assert!(dot.abs() / n as f64 <= 1e-8);
                }
                // idempotence
                let again = project(&fit.fitted, &phi).unwrap();
                for (a, b) in again.fitted.iter().zip(&fit.fitted) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                // Pythagoras and nested spans
                let ms = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
                let rho = 0.3;
                let dv = design_variance(&z, &phi, rho).unwrap();
                prop_assert!(dv <= rho * (1.0 - rho) * ms + 1e-9);
                let bigger = DMatrix::from_fn(n, 3, |i, j| match j { 0 => 1.0, 1 => x[i], _ => x[i] * x[i] });
                prop_assert!(dv >= design_variance(&z, &bigger, rho).unwrap() - 1e-9);
            }

            #[test]
            fn tests_are_permutation_covariant(seed in 0u64..500, shift in 0usize..40) {
                let n = 40;
                let x = normals(n, seed);
                let y = normals(n, seed + 1);
                let arms = simulate_arms(n, seed + 2);
                prop_assume!(arms.iter().filter(|&&a| a == T1).count() >= 4);
                prop_assume!(arms.iter().filter(|&&a| a == T2).count() >= 4);
                let phi = intercept_and(&x);
                let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
                let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
                let ap: Vec<Arm> = perm.iter().map(|&i| arms[i]).collect();
                let php = DMatrix::from_fn(n, 2, |i, j| phi[(perm[i], j)]);
                let a = classical_test(&y, &arms, 0.05).unwrap();
                let b = classical_test(&yp, &ap, 0.05).unwrap();
                prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
                let a = adjusted_test(&y, &arms, &phi, 0.5, 0.05).unwrap();
                let b = adjusted_test(&yp, &ap, &php, 0.5, 0.05).unwrap();
                prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
            }
        }
    }
}
