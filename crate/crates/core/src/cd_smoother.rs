//! Type II Gaussian smoother (backward moment ODEs conditioned on the filter
//! pass) and the change-of-variables export that initializes the variational
//! smoother.

use nalgebra::{DMatrix, DVector};

use crate::cd_filter::{drift_expectations, FilterScheme, FilterTrajectory};
use crate::error::{Error, Result};
use crate::models::{effective_diffusion, symmetrize, GaussianState, SdeModel};
use crate::odeint::{rk4_step, GridFunction, TimeGrid};
use crate::quadrature::cov_factor_spd;

/// Smoothed moments on the filter grid. The smoothing density is continuous
/// across measurement times (no pre/post split).
pub struct SmootherTrajectory {
    pub grid: TimeGrid,
    pub mean: GridFunction<DVector<f64>>,
    pub cov: GridFunction<DMatrix<f64>>,
    pub scheme_name: String,
}

/// Initial variational parameters and Lagrange multipliers on the grid, with
/// left limits stored at measurement nodes (λ and Ψ jump there; A and b jump
/// through their dependence on the filtering moments).
pub struct VariationalInit {
    pub a: GridFunction<DMatrix<f64>>,
    pub b: GridFunction<DVector<f64>>,
    pub lambda: GridFunction<DVector<f64>>,
    pub psi: GridFunction<DMatrix<f64>>,
}

fn spd_solve(p: &DMatrix<f64>, rhs: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    let f = cov_factor_spd(p).map_err(|_| Error::Singular {
        node,
        context: "filter covariance inversion".into(),
    })?;
    let y = f.solve_lower_mat(rhs)?;
    f.solve_upper_t_mat(&y)
}

fn spd_inverse(p: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    spd_solve(p, &DMatrix::identity(n, n), node)
}

/// Cubic Hermite interpolation on [0, 1] scaled to a segment of length `dt`.
fn hermite<T>(y0: &T, y1: &T, d0: &T, d1: &T, w: f64, dt: f64) -> T
where
    T: crate::odeint::Lerp
        + std::ops::Mul<f64, Output = T>
        + for<'a> std::ops::Add<&'a T, Output = T>,
{
    let h00 = 2.0 * w * w * w - 3.0 * w * w + 1.0;
    let h10 = w * w * w - 2.0 * w * w + w;
    let h01 = -2.0 * w * w * w + 3.0 * w * w;
    let h11 = w * w * w - w * w;
    let mut out = y0.clone() * h00;
    out = (d0.clone() * (h10 * dt)) + &out;
    out = (y1.clone() * h01) + &out;
    (d1.clone() * (h11 * dt)) + &out
}

/// Backward smoothing pass. Integrates
/// `dm_s/dt = E_f[f] + (C + Σ) P_f^{-1} (m_s - m_f)` and
/// `dP_s/dt = (C + Σ) P_f^{-1} P_s + P_s P_f^{-1} (C^T + Σ) - Σ`
/// from the filter posterior at the final time. Inside each segment the
/// filter moments are interpolated with cubic Hermite polynomials (their
/// derivatives follow from the cached expectations) and `E_f[f]`,
/// `C = E_f[f (x-m_f)^T]` are recomputed at the interpolated moments with the
/// given scheme.
pub fn smooth_type2(
    model: &SdeModel,
    scheme: &FilterScheme,
    ft: &FilterTrajectory,
) -> Result<SmootherTrajectory> {
    let grid = ft.grid.clone();
    let n = model.state_dim;
    let last = grid.n_steps;

    let mut mean = GridFunction::from_fill(grid.clone(), DVector::zeros(n));
    let mut cov = GridFunction::from_fill(grid.clone(), DMatrix::zeros(n, n));
    let mut m = ft.mean.post(last).clone();
    let mut p = ft.cov.post(last).clone();
    mean.values[last] = m.clone();
    cov.values[last] = p.clone();

    for seg in (0..grid.n_steps).rev() {
        // segment endpoint filter moments and their time derivatives
        let m0 = ft.mean.post(seg);
        let m1 = ft.mean.pre(seg + 1);
        let p0 = ft.cov.post(seg);
        let p1 = ft.cov.pre(seg + 1);
        let dm0 = ft.ef.post(seg).clone();
        let dm1 = ft.ef.pre(seg + 1).clone();
        let s0 = effective_diffusion(model, grid.time(seg))?;
        let s1 = effective_diffusion(model, grid.time(seg + 1))?;
        let dp0 = ft.cross.post(seg) + ft.cross.post(seg).transpose() + s0;
        let dp1 = ft.cross.pre(seg + 1) + ft.cross.pre(seg + 1).transpose() + s1;

        let mut deriv = |t: f64, y: &(DVector<f64>, DMatrix<f64>)| {
            let (ms, ps) = y;
            let w = ((t - grid.time(seg)) / grid.step).clamp(0.0, 1.0);
            let mf = hermite(m0, m1, &dm0, &dm1, w, grid.step);
            let pf = symmetrize(&hermite(p0, p1, &dp0, &dp1, w, grid.step));
            let state = GaussianState::new(mf.clone(), pf.clone());
            let ex = drift_expectations(model, scheme, &state, t)?;
            let ef = ex.ef;
            let c = ex.cross;
            let sigma = effective_diffusion(model, t)?;
            // G = (C + Σ) P_f^{-1}, computed as (P_f^{-1} (C + Σ)^T)^T
            let cs = &c + &sigma;
            let g = spd_solve(&pf, &cs.transpose(), seg)?.transpose();
            let dm = &ef + &g * (ms - &mf);
            let gp = &g * ps;
            let dp = &gp + gp.transpose() - sigma;
            Ok((dm, dp))
        };
        let t1 = grid.time(seg + 1);
        let (mn, pn) = rk4_step(&mut deriv, t1, -grid.step, &(m, p))?;
        if !mn.iter().all(|v| v.is_finite()) || !pn.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                t: grid.time(seg),
                context: format!("type II backward pass at node {seg}"),
            });
        }
        m = mn;
        p = symmetrize(&pn);
        mean.values[seg] = m.clone();
        cov.values[seg] = p.clone();
    }

    Ok(SmootherTrajectory {
        grid,
        mean,
        cov,
        scheme_name: ft.scheme_name.clone(),
    })
}

/// Change-of-variables export:
/// `λ = -P_f^{-1}(m_s - m_f)`, `Ψ = -(P_f^{-1} - P_s^{-1})/2`,
/// `A = -E_f[F_x] + 2ΣΨ`, `b = E_f[f] + E_f[F_x](m_s - m_f) + A m_s - Σλ`.
/// For singular models only the rows of the stochastic block are exported in
/// A and b; λ and Ψ stay full-dimensional.
pub fn export_variational(
    model: &SdeModel,
    ft: &FilterTrajectory,
    st: &SmootherTrajectory,
) -> Result<VariationalInit> {
    if ft.grid != st.grid {
        return Err(Error::config("filter and smoother grids differ"));
    }
    let grid = ft.grid.clone();
    let n = model.state_dim;
    let (row0, nrows) = match &model.singular {
        Some(part) => (part.n1, part.n2),
        None => (0, n),
    };

    let mut a = GridFunction::from_fill(grid.clone(), DMatrix::zeros(nrows, n));
    let mut b = GridFunction::from_fill(grid.clone(), DVector::zeros(nrows));
    let mut lambda = GridFunction::from_fill(grid.clone(), DVector::zeros(n));
    let mut psi = GridFunction::from_fill(grid.clone(), DMatrix::zeros(n, n));

    let node_values = |i: usize,
                       mf: &DVector<f64>,
                       pf: &DMatrix<f64>,
                       ef: &DVector<f64>,
                       efx: &DMatrix<f64>|
     -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>)> {
        let t = grid.time(i);
        let ms = st.mean.post(i);
        let ps = st.cov.post(i);
        let pf_inv = spd_inverse(pf, i)?;
        let ps_inv = spd_inverse(ps, i)?;
        let lam = -(&pf_inv * (ms - mf));
        let psi_v = symmetrize(&((&ps_inv - &pf_inv) * 0.5));
        let sigma = effective_diffusion(model, t)?;
        let a_full = -efx + &sigma * &psi_v * 2.0;
        let b_full = ef + efx * (ms - mf) + &a_full * ms - &sigma * &lam;
        let a_rows = a_full.rows(row0, nrows).into_owned();
        let b_rows = b_full.rows(row0, nrows).into_owned();
        Ok((a_rows, b_rows, lam, psi_v))
    };

    for i in 0..grid.len() {
        let (ai, bi, li, pi) = node_values(i, ft.mean.post(i), ft.cov.post(i), ft.ef.post(i), ft.efx.post(i))?;
        a.values[i] = ai;
        b.values[i] = bi;
        lambda.values[i] = li;
        psi.values[i] = pi;
    }
    for &i in &ft.meas_indices {
        let (ai, bi, li, pi) = node_values(i, ft.mean.pre(i), ft.cov.pre(i), ft.ef.pre(i), ft.efx.pre(i))?;
        a.set_pre(i, ai);
        b.set_pre(i, bi);
        lambda.set_pre(i, li);
        psi.set_pre(i, pi);
    }

    Ok(VariationalInit { a, b, lambda, psi })
}

/// Discrete RTS smoother for the scalar OU model (test oracle).
pub mod rts_oracle {
    /// Smooth exact discrete Kalman pre/post moments backward.
    /// `filtered[i]` are post-update moments, `predicted[i+1]` the one-step
    /// prediction from node i to i+1.
    pub fn smooth(a: f64, q: f64, step: f64, filtered: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let phi = (-a * step).exp();
        let qd = (1.0 - phi * phi) * q / (2.0 * a);
        let n = filtered.len();
        let mut out = vec![(0.0, 0.0); n];
        out[n - 1] = filtered[n - 1];
        for i in (0..n - 1).rev() {
            let (mf, pf) = filtered[i];
            let mp = phi * mf;
            let pp = phi * phi * pf + qd;
            let g = pf * phi / pp;
            let (ms_next, ps_next) = out[i + 1];
            out[i] = (mf + g * (ms_next - mp), pf + g * g * (ps_next - pp));
        }
        out
    }
}
