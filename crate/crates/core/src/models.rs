//! Continuous-discrete system descriptors and the built-in benchmark models.
//!
//! A system is an SDE `dx = f(x,t) dt + L(t) dbeta(t)` with Brownian motion of
//! diffusion `Q(t)`, observed at discrete times through `y_k = h_k(x(t_k)) + v_k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DriftFn = dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>> + Send + Sync;
pub type JacobianFn = dyn Fn(&DVector<f64>, f64) -> Result<DMatrix<f64>> + Send + Sync;
pub type MatrixFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;
pub type MeasFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
pub type MeasJacobianFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Gaussian state at one time instant.
#[derive(Debug, Clone)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianState { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One measurement record.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    pub time: f64,
    pub value: DVector<f64>,
}

/// Partition of the state into a deterministic linear block `x1` with
/// `dx1/dt = F1(t) x` and a stochastic block `x2` with invertible diffusion.
pub struct SingularPartition {
    pub n1: usize,
    pub n2: usize,
    pub f1: Box<MatrixFn>,
    pub drift2: Box<DriftFn>,
    pub drift2_jacobian: Option<Box<JacobianFn>>,
    pub sigma2: Box<MatrixFn>,
}

/// Closed-form Gaussian expectations for a model, when available.
///
/// The e-term providers take the variational parameters `(A, b)` and the
/// effective diffusion of the relevant block.
pub struct AnalyticHook {
    pub expected_drift: Box<dyn Fn(&GaussianState) -> DVector<f64> + Send + Sync>,
    pub expected_drift_jacobian: Box<dyn Fn(&GaussianState) -> DMatrix<f64> + Send + Sync>,
    pub grad_m_e:
        Box<dyn Fn(&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>, &GaussianState) -> DVector<f64> + Send + Sync>,
    pub grad_p_e:
        Box<dyn Fn(&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>, &GaussianState) -> DMatrix<f64> + Send + Sync>,
    pub e_mean:
        Box<dyn Fn(&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>, &GaussianState) -> f64 + Send + Sync>,
}

/// Continuous-time dynamic model.
pub struct SdeModel {
    pub state_dim: usize,
    pub drift: Box<DriftFn>,
    pub drift_jacobian: Option<Box<JacobianFn>>,
    pub dispersion: Box<MatrixFn>,
    pub diffusion: Box<MatrixFn>,
    pub singular: Option<SingularPartition>,
    pub analytic: Option<AnalyticHook>,
}

impl SdeModel {
    pub fn drift(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        (self.drift)(x, t)
    }

    pub fn drift_jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        match &self.drift_jacobian {
            Some(j) => j(x, t),
            None => Err(Error::config("model has no drift Jacobian")),
        }
    }
}

/// Effective diffusion `Sigma(t) = L(t) Q(t) L(t)^T`, symmetrized.
pub fn effective_diffusion(model: &SdeModel, t: f64) -> Result<DMatrix<f64>> {
    let l = (model.dispersion)(t);
    let q = (model.diffusion)(t);
    if l.ncols() != q.nrows() || q.nrows() != q.ncols() || l.nrows() != model.state_dim {
        return Err(Error::config(format!(
            "dispersion {}x{} incompatible with diffusion {}x{}",
            l.nrows(),
            l.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let sigma = &l * q * l.transpose();
    Ok(symmetrize(&sigma))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Discrete measurement model.
pub struct MeasurementModel {
    pub meas_dim: usize,
    pub h: Box<MeasFn>,
    pub h_jacobian: Option<Box<MeasJacobianFn>>,
    pub noise_cov: DMatrix<f64>,
    /// Set when `h(x) = H x` exactly.
    pub linear: Option<DMatrix<f64>>,
    /// Components that are angles; residuals on these are wrapped to (-pi, pi].
    pub angle_indices: Vec<usize>,
}

impl MeasurementModel {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.h_jacobian {
            Some(j) => Ok(j(x)),
            None => Err(Error::config("measurement model has no Jacobian")),
        }
    }

    /// Residual `a - b` with angular components wrapped to (-pi, pi].
    pub fn wrap_residual(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut r = a - b;
        for &i in &self.angle_indices {
            r[i] = wrap_angle(r[i]);
        }
        r
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

/// Raw moments E[x^k], k = 0..=order, of N(m, p) in one dimension.
///
/// Recursion: M_k = m M_{k-1} + (k-1) p M_{k-2}.
pub fn gaussian_raw_moments(m: f64, p: f64, order: usize) -> Vec<f64> {
    let mut mom = vec![0.0; order + 1];
    mom[0] = 1.0;
    if order >= 1 {
        mom[1] = m;
    }
    for k in 2..=order {
        mom[k] = m * mom[k - 1] + (k as f64 - 1.0) * p * mom[k - 2];
    }
    mom
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

fn poly_derive(a: &[f64]) -> Vec<f64> {
    if a.len() <= 1 {
        return vec![0.0];
    }
    a.iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| k as f64 * c)
        .collect()
}

fn poly_expect(a: &[f64], m: f64, p: f64) -> f64 {
    let mom = gaussian_raw_moments(m, p, a.len().saturating_sub(1));
    a.iter().zip(&mom).map(|(c, mk)| c * mk).sum()
}

/// One-dimensional double well: `dx = 4x(1 - x^2) dt + sqrt(sigma) dbeta`,
/// linear measurement `y = x + v`, `v ~ N(0, meas_var)`.
pub fn make_double_well(sigma: f64, meas_var: f64) -> Result<(SdeModel, MeasurementModel)> {
    if sigma <= 0.0 || meas_var <= 0.0 {
        return Err(Error::config("double well requires sigma > 0 and meas_var > 0"));
    }

    // Residual polynomial r(x) = f(x) + a x - b = -4x^3 + (4 + a)x - b.
    fn residual_poly(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<f64> {
        vec![-b[0], 4.0 + a[(0, 0)], 0.0, -4.0]
    }

    let hook = AnalyticHook {
        expected_drift: Box::new(|s: &GaussianState| {
            let mom = gaussian_raw_moments(s.mean[0], s.cov[(0, 0)], 3);
            DVector::from_element(1, 4.0 * mom[1] - 4.0 * mom[3])
        }),
        expected_drift_jacobian: Box::new(|s: &GaussianState| {
            let mom = gaussian_raw_moments(s.mean[0], s.cov[(0, 0)], 2);
            DMatrix::from_element(1, 1, 4.0 - 12.0 * mom[2])
        }),
        e_mean: Box::new(|a, b, sig, s: &GaussianState| {
            let r = residual_poly(a, b);
            let r2 = poly_mul(&r, &r);
            poly_expect(&r2, s.mean[0], s.cov[(0, 0)]) / (2.0 * sig[(0, 0)])
        }),
        grad_m_e: Box::new(|a, b, sig, s: &GaussianState| {
            // grad_m E[e] = E[e_x] = E[r r'] / sigma
            let r = residual_poly(a, b);
            let rp = poly_derive(&r);
            let prod = poly_mul(&r, &rp);
            DVector::from_element(1, poly_expect(&prod, s.mean[0], s.cov[(0, 0)]) / sig[(0, 0)])
        }),
        grad_p_e: Box::new(|a, b, sig, s: &GaussianState| {
            // grad_P E[e] = (1/2) E[e_xx] = (E[r'^2] + E[r r'']) / (2 sigma)
            let r = residual_poly(a, b);
            let rp = poly_derive(&r);
            let rpp = poly_derive(&rp);
            let t1 = poly_mul(&rp, &rp);
            let t2 = poly_mul(&r, &rpp);
            let (m, p) = (s.mean[0], s.cov[(0, 0)]);
            DMatrix::from_element(1, 1, (poly_expect(&t1, m, p) + poly_expect(&t2, m, p)) / (2.0 * sig[(0, 0)]))
        }),
    };

    let model = SdeModel {
        state_dim: 1,
        drift: Box::new(|x: &DVector<f64>, _t| {
            Ok(DVector::from_element(1, 4.0 * x[0] * (1.0 - x[0] * x[0])))
        }),
        drift_jacobian: Some(Box::new(|x: &DVector<f64>, _t| {
            Ok(DMatrix::from_element(1, 1, 4.0 - 12.0 * x[0] * x[0]))
        })),
        dispersion: Box::new(|_t| DMatrix::identity(1, 1)),
        diffusion: Box::new(move |_t| DMatrix::from_element(1, 1, sigma)),
        singular: None,
        analytic: Some(hook),
    };

    let meas = MeasurementModel {
        meas_dim: 1,
        h: Box::new(|x: &DVector<f64>| x.clone()),
        h_jacobian: Some(Box::new(|_x: &DVector<f64>| DMatrix::identity(1, 1))),
        noise_cov: DMatrix::from_element(1, 1, meas_var),
        linear: Some(DMatrix::identity(1, 1)),
        angle_indices: vec![],
    };

    Ok((model, meas))
}

/// Linear Ornstein-Uhlenbeck test model: `dx = -a x dt + sqrt(q) dbeta`, `y = x + v`.
pub fn make_ou(a: f64, q: f64, r: f64) -> Result<(SdeModel, MeasurementModel)> {
    if a <= 0.0 || q <= 0.0 || r <= 0.0 {
        return Err(Error::config("OU model requires a, q, r > 0"));
    }
    let model = SdeModel {
        state_dim: 1,
        drift: Box::new(move |x: &DVector<f64>, _t| Ok(DVector::from_element(1, -a * x[0]))),
        drift_jacobian: Some(Box::new(move |_x: &DVector<f64>, _t| {
            Ok(DMatrix::from_element(1, 1, -a))
        })),
        dispersion: Box::new(|_t| DMatrix::identity(1, 1)),
        diffusion: Box::new(move |_t| DMatrix::from_element(1, 1, q)),
        singular: None,
        analytic: None,
    };
    let meas = MeasurementModel {
        meas_dim: 1,
        h: Box::new(|x: &DVector<f64>| x.clone()),
        h_jacobian: Some(Box::new(|_x: &DVector<f64>| DMatrix::identity(1, 1))),
        noise_cov: DMatrix::from_element(1, 1, r),
        linear: Some(DMatrix::identity(1, 1)),
        angle_indices: vec![],
    };
    Ok((model, meas))
}

/// Reentry tracking constants (km, km/s, s).
pub mod reentry {
    pub const BETA0: f64 = -0.59783;
    pub const H0: f64 = 13.406;
    pub const GM0: f64 = 3.9860e5;
    pub const R0: f64 = 6374.0;
    pub const Q_POS_VEL: f64 = 2.4064e-5;
    pub const Q_PARAM: f64 = 1.0e-5;
    /// Default radar site; the reference benchmark places the radar on the
    /// surface at (6375, 0).
    pub const RADAR: [f64; 2] = [6375.0, 0.0];
}

/// Five-dimensional reentry vehicle model with radar range/bearing measurements.
///
/// State is `[r1, r2, v1, v2, alpha]`. The position block is deterministic
/// (`dr/dt = v`), so the model carries a singular partition with `n1 = 2`.
pub fn make_reentry() -> (SdeModel, MeasurementModel) {
    make_reentry_with_radar(reentry::RADAR)
}

fn reentry_force_terms(x: &DVector<f64>) -> Result<(f64, f64, f64, f64)> {
    use reentry::*;
    let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
    if rho == 0.0 {
        return Err(Error::Eval {
            context: "reentry drift: |r| = 0".into(),
            index: 0,
        });
    }
    let vn = (x[2] * x[2] + x[3] * x[3]).sqrt();
    let g = -GM0 / (rho * rho * rho);
    // Drag coefficient beta0 e^alpha exp{(R0 - |r|)/H0} |v|; beta0 < 0 gives
    // deceleration opposing the velocity.
    let d = BETA0 * x[4].exp() * ((R0 - rho) / H0).exp() * vn;
    if !g.is_finite() || !d.is_finite() {
        return Err(Error::Eval {
            context: "reentry drift overflow".into(),
            index: 0,
        });
    }
    Ok((g, d, rho, vn))
}

fn reentry_drift(x: &DVector<f64>, _t: f64) -> Result<DVector<f64>> {
    let (g, d, _, _) = reentry_force_terms(x)?;
    Ok(DVector::from_vec(vec![
        x[2],
        x[3],
        g * x[0] + d * x[2],
        g * x[1] + d * x[3],
        0.0,
    ]))
}

fn reentry_drift_jacobian(x: &DVector<f64>, _t: f64) -> Result<DMatrix<f64>> {
    use reentry::*;
    let (g, d, rho, vn) = reentry_force_terms(x)?;
    let mut j = DMatrix::zeros(5, 5);
    j[(0, 2)] = 1.0;
    j[(1, 3)] = 1.0;
    // dG/dr_j = 3 Gm0 r_j / rho^5
    let dg = [3.0 * GM0 * x[0] / rho.powi(5), 3.0 * GM0 * x[1] / rho.powi(5)];
    // dD/dr_j = -D r_j / (H0 rho); dD/dv_j = D v_j / vn^2; dD/dalpha = D
    let dd_r = [-d * x[0] / (H0 * rho), -d * x[1] / (H0 * rho)];
    let dd_v = if vn > 0.0 {
        [d * x[2] / (vn * vn), d * x[3] / (vn * vn)]
    } else {
        [0.0, 0.0]
    };
    for i in 0..2 {
        let vi = x[2 + i];
        for k in 0..2 {
            j[(2 + i, k)] = dg[k] * x[i] + dd_r[k] * vi;
            j[(2 + i, 2 + k)] = dd_v[k] * vi;
        }
        j[(2 + i, i)] += g;
        j[(2 + i, 2 + i)] += d;
        j[(2 + i, 4)] = d * vi;
    }
    Ok(j)
}

pub fn make_reentry_with_radar(radar: [f64; 2]) -> (SdeModel, MeasurementModel) {
    use reentry::*;
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![Q_POS_VEL, Q_POS_VEL, Q_PARAM]));
    let q2 = q.clone();

    let mut dispersion = DMatrix::zeros(5, 3);
    dispersion[(2, 0)] = 1.0;
    dispersion[(3, 1)] = 1.0;
    dispersion[(4, 2)] = 1.0;

    let mut f1 = DMatrix::zeros(2, 5);
    f1[(0, 2)] = 1.0;
    f1[(1, 3)] = 1.0;

    let partition = SingularPartition {
        n1: 2,
        n2: 3,
        f1: Box::new(move |_t| f1.clone()),
        drift2: Box::new(|x: &DVector<f64>, t| {
            let f = reentry_drift(x, t)?;
            Ok(f.rows(2, 3).into_owned())
        }),
        drift2_jacobian: Some(Box::new(|x: &DVector<f64>, t| {
            let j = reentry_drift_jacobian(x, t)?;
            Ok(j.rows(2, 3).into_owned())
        })),
        sigma2: Box::new(move |_t| q2.clone()),
    };

    let model = SdeModel {
        state_dim: 5,
        drift: Box::new(reentry_drift),
        drift_jacobian: Some(Box::new(reentry_drift_jacobian)),
        dispersion: Box::new(move |_t| dispersion.clone()),
        diffusion: Box::new(move |_t| q.clone()),
        singular: Some(partition),
        analytic: None,
    };

    let s = radar;
    let s_jac = radar;
    let meas = MeasurementModel {
        meas_dim: 2,
        h: Box::new(move |x: &DVector<f64>| {
            let dx = x[0] - s[0];
            let dy = x[1] - s[1];
            DVector::from_vec(vec![(dx * dx + dy * dy).sqrt(), dy.atan2(dx)])
        }),
        h_jacobian: Some(Box::new(move |x: &DVector<f64>| {
            let dx = x[0] - s_jac[0];
            let dy = x[1] - s_jac[1];
            let r2 = dx * dx + dy * dy;
            let r = r2.sqrt();
            let mut j = DMatrix::zeros(2, 5);
            j[(0, 0)] = dx / r;
            j[(0, 1)] = dy / r;
            j[(1, 0)] = -dy / r2;
            j[(1, 1)] = dx / r2;
            j
        })),
        noise_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0e-3, 1.7e-3])),
        linear: None,
        angle_indices: vec![1],
    };

    (model, meas)
}

/// Generative prior of the reentry benchmark (`alpha` variance zero).
pub fn reentry_truth_prior() -> GaussianState {
    let mean = DVector::from_vec(vec![6500.4, 349.14, -1.8093, -6.7967, 0.6932]);
    let mut cov = DMatrix::zeros(5, 5);
    for i in 0..4 {
        cov[(i, i)] = 1.0e-6;
    }
    GaussianState::new(mean, cov)
}

/// Prior used by the estimators: `m5 = 0`, `P55 = 1`.
pub fn reentry_estimation_prior() -> GaussianState {
    let mut prior = reentry_truth_prior();
    prior.mean[4] = 0.0;
    prior.cov[(4, 4)] = 1.0;
    prior
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_jacobian(
        f: &dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
        x: &DVector<f64>,
        t: f64,
    ) -> DMatrix<f64> {
        let n = x.len();
        let fx = f(x, t).unwrap();
        let mut j = DMatrix::zeros(fx.len(), n);
        for k in 0..n {
            let h = 1e-5 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let d = (f(&xp, t).unwrap() - f(&xm, t).unwrap()) / (2.0 * h);
            j.set_column(k, &d);
        }
        j
    }

    #[test]
    fn effective_diffusion_identity_and_rank1() {
        let (model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        let sigma = effective_diffusion(&model, 0.0).unwrap();
        assert_relative_eq!(sigma[(0, 0)], 2.0);

        // L = [0; 1], Q = [2] -> Sigma = [[0,0],[0,2]]
        let model2 = SdeModel {
            state_dim: 2,
            drift: Box::new(|x: &DVector<f64>, _| Ok(x.clone())),
            drift_jacobian: None,
            dispersion: Box::new(|_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
            diffusion: Box::new(|_| DMatrix::from_element(1, 1, 2.0)),
            singular: None,
            analytic: None,
        };
        let sigma2 = effective_diffusion(&model2, 0.0).unwrap();
        assert_eq!(sigma2[(0, 0)], 0.0);
        assert_eq!(sigma2[(0, 1)], 0.0);
        assert_relative_eq!(sigma2[(1, 1)], 2.0);
    }

    #[test]
    fn effective_diffusion_reentry_diagonal() {
        let (model, _) = make_reentry();
        let sigma = effective_diffusion(&model, 0.0).unwrap();
        let expected = [0.0, 0.0, 2.4064e-5, 2.4064e-5, 1.0e-5];
        for i in 0..5 {
            assert_relative_eq!(sigma[(i, i)], expected[i], max_relative = 1e-12);
            for j in 0..5 {
                if i != j {
                    assert_eq!(sigma[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn effective_diffusion_dimension_mismatch() {
        let model = SdeModel {
            state_dim: 2,
            drift: Box::new(|x: &DVector<f64>, _| Ok(x.clone())),
            drift_jacobian: None,
            dispersion: Box::new(|_| DMatrix::identity(2, 2)),
            diffusion: Box::new(|_| DMatrix::identity(3, 3)),
            singular: None,
            analytic: None,
        };
        assert!(effective_diffusion(&model, 0.0).is_err());
    }

    #[test]
    fn double_well_drift_zeros() {
        let (model, _) = make_double_well(1.0, 0.1).unwrap();
        for x0 in [0.0, 1.0, -1.0] {
            let f = model.drift(&DVector::from_element(1, x0), 0.0).unwrap();
            assert_relative_eq!(f[0], 0.0);
        }
        assert!(make_double_well(-1.0, 0.1).is_err());
        assert!(make_double_well(1.0, 0.0).is_err());
    }

    #[test]
    fn double_well_analytic_drift_expectation() {
        let (model, _) = make_double_well(1.0, 0.1).unwrap();
        let hook = model.analytic.as_ref().unwrap();
        let s = GaussianState::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0));
        // E[f] = 4m - 4(m^3 + 3mP) = 4 - 16 = -12
        assert_relative_eq!((hook.expected_drift)(&s)[0], -12.0, max_relative = 1e-12);
        // E[F_x] = 4 - 12(m^2 + P) = -20
        assert_relative_eq!((hook.expected_drift_jacobian)(&s)[(0, 0)], -20.0, max_relative = 1e-12);
    }

    #[test]
    fn ou_basics() {
        let (model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        let f = model.drift(&DVector::from_element(1, 1.0), 0.0).unwrap();
        assert_relative_eq!(f[0], -1.0);
        let j = model.drift_jacobian(&DVector::from_element(1, 3.7), 0.0).unwrap();
        assert_relative_eq!(j[(0, 0)], -1.0);
        // stationary variance q / (2a) = 1
        assert_relative_eq!(2.0 / (2.0 * 1.0), 1.0);
        assert!(make_ou(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn reentry_force_values() {
        use reentry::*;
        // G at |r| = R0
        let x = DVector::from_vec(vec![R0, 0.0, 0.0, 1.0, 0.0]);
        let (g, d, _, _) = reentry_force_terms(&x).unwrap();
        assert_relative_eq!(g, -3.9860e5 / R0.powi(3), max_relative = 1e-12);
        // drag coefficient magnitude 0.59783 at |r| = R0, alpha = 0, |v| = 1;
        // the sign is negative (drag opposes velocity).
        assert_relative_eq!(d.abs(), 0.59783, max_relative = 1e-12);
        assert!(d < 0.0);
    }

    #[test]
    fn reentry_bearing_on_radar_axis() {
        let (_, meas) = make_reentry();
        let x = DVector::from_vec(vec![reentry::RADAR[0] + 1.0, reentry::RADAR[1], 0.0, 0.0, 0.0]);
        let y = meas.eval(&x);
        assert_relative_eq!(y[1], 0.0);
        assert_relative_eq!(y[0], 1.0);
    }

    #[test]
    fn reentry_drift_finite_at_initial_mean() {
        let (model, _) = make_reentry();
        let prior = reentry_truth_prior();
        let f = model.drift(&prior.mean, 0.0).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reentry_drift_errors_at_origin() {
        let (model, _) = make_reentry();
        let x = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(model.drift(&x, 0.0).is_err());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

        let (dw, _) = make_double_well(1.0, 0.1).unwrap();
        let (ou, _) = make_ou(1.3, 0.7, 0.5).unwrap();
        let (re, _) = make_reentry();

        for _ in 0..100 {
            let x1 = DVector::from_element(1, rng.gen_range(-2.0..2.0));
            let j = dw.drift_jacobian(&x1, 0.0).unwrap();
            let fd = fd_jacobian(&*dw.drift, &x1, 0.0);
            assert_relative_eq!(j[(0, 0)], fd[(0, 0)], max_relative = 1e-4, epsilon = 1e-7);

            let j = ou.drift_jacobian(&x1, 0.0).unwrap();
            let fd = fd_jacobian(&*ou.drift, &x1, 0.0);
            assert_relative_eq!(j[(0, 0)], fd[(0, 0)], max_relative = 1e-4, epsilon = 1e-7);

            let xr = DVector::from_vec(vec![
                6500.0 + rng.gen_range(-20.0..20.0),
                349.0 + rng.gen_range(-20.0..20.0),
                rng.gen_range(-7.0..-1.0),
                rng.gen_range(-7.0..-1.0),
                rng.gen_range(-0.5..1.0),
            ]);
            let j = re.drift_jacobian(&xr, 0.0).unwrap();
            let fd = fd_jacobian(&*re.drift, &xr, 0.0);
            for i in 0..5 {
                for k in 0..5 {
                    assert_relative_eq!(j[(i, k)], fd[(i, k)], max_relative = 1e-4, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn reentry_partition_is_consistent_with_full_drift() {
        let (model, _) = make_reentry();
        let part = model.singular.as_ref().unwrap();
        let x = reentry_truth_prior().mean;
        let full = model.drift(&x, 0.0).unwrap();
        let block = (part.drift2)(&x, 0.0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(block[i], full[2 + i]);
        }
        // F1 x = v
        let f1 = (part.f1)(0.0);
        let top = &f1 * &x;
        assert_relative_eq!(top[0], x[2]);
        assert_relative_eq!(top[1], x[3]);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(
            wrap_angle(2.0 * std::f64::consts::PI + 0.3),
            0.3,
            epsilon = 1e-12
        );
        assert_relative_eq!(wrap_angle(-0.1), -0.1, epsilon = 1e-12);
        assert!(wrap_angle(7.0) <= std::f64::consts::PI);
        assert!(wrap_angle(-7.0) > -std::f64::consts::PI);
    }
}
