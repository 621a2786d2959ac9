//! Sigma-point rules and Gaussian expectation evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::GaussianState;

/// Identifier of a sigma-point rule.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleLabel {
    Cubature,
    Unscented { alpha: f64, beta: f64, kappa: f64 },
    GaussHermite { order: usize },
}

/// A weighted sigma-point set for expectations under N(0, I).
#[derive(Debug, Clone)]
pub struct SigmaRule {
    pub dim: usize,
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
    pub label: RuleLabel,
}

impl SigmaRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Spherical cubature rule: 2n points at +-sqrt(n) e_i, equal weights.
pub fn cubature_rule(n: usize) -> SigmaRule {
    let s = (n as f64).sqrt();
    let mut points = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut p = DVector::zeros(n);
        p[i] = s;
        points.push(p);
    }
    for i in 0..n {
        let mut p = DVector::zeros(n);
        p[i] = -s;
        points.push(p);
    }
    let w = vec![1.0 / (2.0 * n as f64); 2 * n];
    SigmaRule {
        dim: n,
        points,
        mean_weights: w.clone(),
        cov_weights: w,
        label: RuleLabel::Cubature,
    }
}

/// Unscented transform rule with parameters (alpha, beta, kappa).
pub fn unscented_rule(n: usize, alpha: f64, beta: f64, kappa: f64) -> Result<SigmaRule> {
    let nf = n as f64;
    let lambda = alpha * alpha * (nf + kappa) - nf;
    if nf + lambda <= 0.0 {
        return Err(Error::config(format!(
            "unscented rule requires n + lambda > 0 (got {})",
            nf + lambda
        )));
    }
    let scale = (nf + lambda).sqrt();
    let mut points = vec![DVector::zeros(n)];
    for i in 0..n {
        let mut p = DVector::zeros(n);
        p[i] = scale;
        points.push(p);
    }
    for i in 0..n {
        let mut p = DVector::zeros(n);
        p[i] = -scale;
        points.push(p);
    }
    let wi = 1.0 / (2.0 * (nf + lambda));
    let mut mean_weights = vec![wi; 2 * n + 1];
    let mut cov_weights = vec![wi; 2 * n + 1];
    mean_weights[0] = lambda / (nf + lambda);
    cov_weights[0] = mean_weights[0] + 1.0 - alpha * alpha + beta;
    Ok(SigmaRule {
        dim: n,
        points,
        mean_weights,
        cov_weights,
        label: RuleLabel::Unscented { alpha, beta, kappa },
    })
}

/// 1-D Gauss-Hermite nodes and weights for the weight e^{-u^2/2}/sqrt(2 pi),
/// computed from the Jacobi matrix of the probabilists' Hermite recurrence.
pub fn gauss_hermite_1d(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(order, order);
    for k in 1..order {
        let off = (k as f64).sqrt();
        jac[(k - 1, k)] = off;
        jac[(k, k - 1)] = off;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let nodes = pairs.iter().map(|p| p.0).collect();
    let weights = pairs.iter().map(|p| p.1).collect();
    (nodes, weights)
}

pub const GH_POINT_CAP: usize = 100_000;

/// Tensor-product Gauss-Hermite rule with `order^n` points.
pub fn gauss_hermite_rule(n: usize, order: usize) -> Result<SigmaRule> {
    if order < 1 {
        return Err(Error::config("Gauss-Hermite order must be >= 1"));
    }
    let count = (order as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if count > GH_POINT_CAP as u128 {
        return Err(Error::Resource(format!(
            "Gauss-Hermite rule would need {count} points (cap {GH_POINT_CAP})"
        )));
    }
    let (nodes, weights) = gauss_hermite_1d(order);
    let total = count as usize;
    let mut points = Vec::with_capacity(total);
    let mut w = Vec::with_capacity(total);
    for idx in 0..total {
        let mut p = DVector::zeros(n);
        let mut wt = 1.0;
        let mut rem = idx;
        for d in 0..n {
            let j = rem % order;
            rem /= order;
            p[d] = nodes[j];
            wt *= weights[j];
        }
        points.push(p);
        w.push(wt);
    }
    Ok(SigmaRule {
        dim: n,
        points,
        mean_weights: w.clone(),
        cov_weights: w,
        label: RuleLabel::GaussHermite { order },
    })
}

/// Lower-triangular covariance factor with `L L^T = P`.
#[derive(Debug, Clone)]
pub struct CovFactor {
    pub l: DMatrix<f64>,
    /// Jitter (relative to trace/n) that was added to make the factorization succeed.
    pub jitter: f64,
}

const JITTER_LADDER: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

fn try_semidefinite_cholesky(p: &DMatrix<f64>, pivot_tol: f64) -> Option<DMatrix<f64>> {
    let n = p.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > pivot_tol {
            let lj = d.sqrt();
            l[(j, j)] = lj;
            for i in (j + 1)..n {
                let mut s = p[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / lj;
            }
        } else if d > -pivot_tol {
            // zero pivot: allowed for semidefinite input, column stays zero
            l[(j, j)] = 0.0;
        } else {
            return None;
        }
    }
    Some(l)
}

/// Factor a symmetric PSD matrix, escalating diagonal jitter if needed.
/// Zero pivots are allowed so singular covariances produce degenerate points.
pub fn cov_factor(p: &DMatrix<f64>) -> Result<CovFactor> {
    let n = p.nrows();
    let scale = (p.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let pivot_tol = 1e-12 * scale;
    let mut last = 0.0;
    for &jit in &JITTER_LADDER {
        last = jit;
        let candidate = if jit == 0.0 {
            p.clone()
        } else {
            p + DMatrix::identity(n, n) * (jit * scale)
        };
        if let Some(l) = try_semidefinite_cholesky(&candidate, pivot_tol) {
            return Ok(CovFactor { l, jitter: jit });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// Factor requiring strictly positive pivots (invertible L), escalating jitter.
pub fn cov_factor_spd(p: &DMatrix<f64>) -> Result<CovFactor> {
    let n = p.nrows();
    let scale = (p.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut last = 0.0;
    for &jit in &JITTER_LADDER {
        last = jit;
        let candidate = if jit == 0.0 {
            p.clone()
        } else {
            p + DMatrix::identity(n, n) * (jit * scale)
        };
        if let Some(chol) = nalgebra::Cholesky::new(candidate) {
            return Ok(CovFactor {
                l: chol.l(),
                jitter: jit,
            });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

impl CovFactor {
    /// Sigma points `m + L xi_i` for a rule.
    pub fn transform_points(&self, mean: &DVector<f64>, rule: &SigmaRule) -> Vec<DVector<f64>> {
        rule.points.iter().map(|xi| mean + &self.l * xi).collect()
    }

    /// Solve `L y = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.l
            .solve_lower_triangular(b)
            .ok_or(Error::NotPositiveDefinite { jitter: self.jitter })
    }

    /// `B L^{-1}` via triangular solves (no explicit inverse).
    pub fn right_div(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        // (B L^{-1})^T = L^{-T} B^T: solve L^T X = B^T
        let x = self
            .l
            .transpose()
            .solve_upper_triangular(&b.transpose())
            .ok_or(Error::NotPositiveDefinite { jitter: self.jitter })?;
        Ok(x.transpose())
    }

    /// `L^{-T} v`.
    pub fn solve_upper_t(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.l
            .transpose()
            .solve_upper_triangular(v)
            .ok_or(Error::NotPositiveDefinite { jitter: self.jitter })
    }

    /// `L^{-T} B` for a matrix.
    pub fn solve_upper_t_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.l
            .transpose()
            .solve_upper_triangular(b)
            .ok_or(Error::NotPositiveDefinite { jitter: self.jitter })
    }

    /// `L^{-1} B` for a matrix.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.l
            .solve_lower_triangular(b)
            .ok_or(Error::NotPositiveDefinite { jitter: self.jitter })
    }
}

fn check_finite(v: &DVector<f64>, context: &str, index: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Eval {
            context: context.into(),
            index,
        })
    }
}

/// Sigma-point expectation of a vector-valued function: `sum W_m g(m + L xi)`.
pub fn expect<F>(g: F, state: &GaussianState, rule: &SigmaRule) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let factor = cov_factor(&state.cov)?;
    let mut acc: Option<DVector<f64>> = None;
    for (i, xi) in rule.points.iter().enumerate() {
        let x = &state.mean + &factor.l * xi;
        let gx = g(&x)?;
        check_finite(&gx, "expect", i)?;
        match &mut acc {
            Some(a) => *a += gx * rule.mean_weights[i],
            None => acc = Some(gx * rule.mean_weights[i]),
        }
    }
    Ok(acc.expect("sigma rule has no points"))
}

/// Statistical Jacobian `E[G_x] = sum W g(m + L xi) xi^T L^{-1}`.
pub fn expect_stat_jacobian<F>(g: F, state: &GaussianState, rule: &SigmaRule) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let factor = cov_factor_spd(&state.cov)?;
    let n = state.dim();
    let mut acc: Option<DMatrix<f64>> = None;
    for (i, xi) in rule.points.iter().enumerate() {
        let x = &state.mean + &factor.l * xi;
        let gx = g(&x)?;
        check_finite(&gx, "expect_stat_jacobian", i)?;
        let outer = &gx * xi.transpose() * rule.cov_weights[i];
        match &mut acc {
            Some(a) => *a += outer,
            None => acc = Some(outer),
        }
    }
    let b = acc.unwrap_or_else(|| DMatrix::zeros(n, n));
    factor.right_div(&b)
}
