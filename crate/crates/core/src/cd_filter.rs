//! Continuous-discrete Gaussian filter: moment-ODE prediction between
//! measurements and a moment-matched Kalman update at measurement times.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{
    effective_diffusion, symmetrize, GaussianState, MeasurementModel, MeasurementRecord, SdeModel,
};
use crate::odeint::{rk4_step, GridFunction, TimeGrid};
use crate::quadrature::{cov_factor, cov_factor_spd, SigmaRule};

/// How Gaussian expectations over the drift and measurement map are computed.
#[derive(Debug, Clone)]
pub enum FilterScheme {
    /// Taylor linearization at the mean.
    Ext,
    /// Sigma-point rule with the statistical (derivative-free) cross term.
    SigmaPoint(SigmaRule),
    /// Sigma-point rule evaluating the drift Jacobian at the points
    /// (`E[f (x-m)^T] = E[F_x] P`).
    SigmaPointJacobian(SigmaRule),
    /// Model-provided closed-form expectations.
    Analytic,
}

impl FilterScheme {
    pub fn name(&self) -> &'static str {
        match self {
            FilterScheme::Ext => "ext",
            FilterScheme::SigmaPoint(_) => "sigma",
            FilterScheme::SigmaPointJacobian(_) => "sigma-jacobian",
            FilterScheme::Analytic => "analytic",
        }
    }
}

/// Drift expectations under the current filtering density.
#[derive(Debug, Clone)]
pub struct MomentExpectations {
    /// E[f]
    pub ef: DVector<f64>,
    /// E[f (x - m)^T]
    pub cross: DMatrix<f64>,
    /// E[F_x]
    pub efx: DMatrix<f64>,
}

pub fn drift_expectations(
    model: &SdeModel,
    scheme: &FilterScheme,
    state: &GaussianState,
    t: f64,
) -> Result<MomentExpectations> {
    match scheme {
        FilterScheme::Ext => {
            let ef = model.drift(&state.mean, t)?;
            let fx = model.drift_jacobian(&state.mean, t)?;
            let cross = &fx * &state.cov;
            Ok(MomentExpectations { ef, cross, efx: fx })
        }
        FilterScheme::Analytic => {
            let hook = model
                .analytic
                .as_ref()
                .ok_or_else(|| Error::config("analytic scheme requires model hooks"))?;
            let ef = (hook.expected_drift)(state);
            let efx = (hook.expected_drift_jacobian)(state);
            let cross = &efx * &state.cov;
            Ok(MomentExpectations { ef, cross, efx })
        }
        FilterScheme::SigmaPoint(rule) => {
            let factor = cov_factor(&state.cov)?;
            let n = state.dim();
            let mut ef = DVector::zeros(n);
            let mut b = DMatrix::zeros(n, n);
            let mut fs = Vec::with_capacity(rule.len());
            for (i, xi) in rule.points.iter().enumerate() {
                let x = &state.mean + &factor.l * xi;
                let f = model.drift(&x, t)?;
                if !f.iter().all(|v| v.is_finite()) {
                    return Err(Error::Eval {
                        context: "drift at sigma point".into(),
                        index: i,
                    });
                }
                ef.axpy(rule.mean_weights[i], &f, 1.0);
                fs.push(f);
            }
            for (i, xi) in rule.points.iter().enumerate() {
                b += (&fs[i] - &ef) * xi.transpose() * rule.cov_weights[i];
            }
            let cross = &b * factor.l.transpose();
            // E[F_x] = B L^{-1}; requires an invertible factor.
            let spd = cov_factor_spd(&state.cov)?;
            let efx = spd.right_div(&b)?;
            Ok(MomentExpectations { ef, cross, efx })
        }
        FilterScheme::SigmaPointJacobian(rule) => {
            let factor = cov_factor(&state.cov)?;
            let n = state.dim();
            let mut ef = DVector::zeros(n);
            let mut efx = DMatrix::zeros(n, n);
            for (i, xi) in rule.points.iter().enumerate() {
                let x = &state.mean + &factor.l * xi;
                let f = model.drift(&x, t)?;
                let fx = model.drift_jacobian(&x, t)?;
                if !f.iter().all(|v| v.is_finite()) || !fx.iter().all(|v| v.is_finite()) {
                    return Err(Error::Eval {
                        context: "drift/Jacobian at sigma point".into(),
                        index: i,
                    });
                }
                ef.axpy(rule.mean_weights[i], &f, 1.0);
                efx += fx * rule.mean_weights[i];
            }
            let cross = &efx * &state.cov;
            Ok(MomentExpectations { ef, cross, efx })
        }
    }
}

/// Filtering trajectory with pre/post moments at measurement nodes and cached
/// drift expectations at every node (consumed by the Type II smoother).
pub struct FilterTrajectory {
    pub grid: TimeGrid,
    pub mean: GridFunction<DVector<f64>>,
    pub cov: GridFunction<DMatrix<f64>>,
    pub ef: GridFunction<DVector<f64>>,
    pub cross: GridFunction<DMatrix<f64>>,
    pub efx: GridFunction<DMatrix<f64>>,
    pub meas_indices: Vec<usize>,
    pub scheme_name: String,
}

impl FilterTrajectory {
    pub fn state_post(&self, i: usize) -> GaussianState {
        GaussianState::new(self.mean.post(i).clone(), self.cov.post(i).clone())
    }

    pub fn state_pre(&self, i: usize) -> GaussianState {
        GaussianState::new(self.mean.pre(i).clone(), self.cov.pre(i).clone())
    }
}

/// Propagate moments from `t_from` to `t_to` (both on the grid) through the
/// prediction ODEs, taking one RK4 step per grid segment.
pub fn predict(
    model: &SdeModel,
    scheme: &FilterScheme,
    state: &GaussianState,
    t_from: f64,
    t_to: f64,
    grid: &TimeGrid,
) -> Result<GaussianState> {
    let i0 = grid.index_of(t_from)?;
    let i1 = grid.index_of(t_to)?;
    if i1 <= i0 {
        return Err(Error::config("predict requires t_to > t_from"));
    }
    let mut m = state.mean.clone();
    let mut p = state.cov.clone();
    for i in i0..i1 {
        let (mn, pn) = predict_step(model, scheme, &m, &p, grid.time(i), grid.step)?;
        m = mn;
        p = pn;
    }
    Ok(GaussianState::new(m, p))
}

fn predict_step(
    model: &SdeModel,
    scheme: &FilterScheme,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    t: f64,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut deriv = |tt: f64, y: &(DVector<f64>, DMatrix<f64>)| {
        let st = GaussianState::new(y.0.clone(), symmetrize(&y.1));
        let ex = drift_expectations(model, scheme, &st, tt)?;
        let sigma = effective_diffusion(model, tt)?;
        let dp = &ex.cross + ex.cross.transpose() + sigma;
        Ok((ex.ef, dp))
    };
    let (mn, pn) = rk4_step(&mut deriv, t, dt, &(m.clone(), p.clone()))?;
    if !mn.iter().all(|v| v.is_finite()) || !pn.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            t: t + dt,
            context: "filter prediction".into(),
        });
    }
    Ok((mn, symmetrize(&pn)))
}

/// Measurement update at one record.
pub fn update(
    state: &GaussianState,
    meas: &MeasurementModel,
    y: &DVector<f64>,
    scheme: &FilterScheme,
) -> Result<GaussianState> {
    let n = state.dim();
    let d = meas.meas_dim;
    let (eh, s_cov, c_cov) = if let Some(h) = &meas.linear {
        let eh = h * &state.mean;
        let s = h * &state.cov * h.transpose() + &meas.noise_cov;
        let c = &state.cov * h.transpose();
        (eh, s, c)
    } else {
        match scheme {
            FilterScheme::Ext => {
                let h = meas.jacobian(&state.mean)?;
                let eh = meas.eval(&state.mean);
                let s = &h * &state.cov * h.transpose() + &meas.noise_cov;
                let c = &state.cov * h.transpose();
                (eh, s, c)
            }
            FilterScheme::Analytic => {
                return Err(Error::config(
                    "analytic update requires a linear measurement model",
                ))
            }
            FilterScheme::SigmaPoint(rule) => {
                let factor = cov_factor(&state.cov)?;
                let pts = factor.transform_points(&state.mean, rule);
                let hs: Vec<DVector<f64>> = pts.iter().map(|x| meas.eval(x)).collect();
                let mut eh = DVector::zeros(d);
                for (i, h) in hs.iter().enumerate() {
                    eh.axpy(rule.mean_weights[i], h, 1.0);
                }
                let mut s = meas.noise_cov.clone();
                let mut c = DMatrix::zeros(n, d);
                for (i, h) in hs.iter().enumerate() {
                    let dh = meas.wrap_residual(h, &eh);
                    let dx = &pts[i] - &state.mean;
                    s += &dh * dh.transpose() * rule.cov_weights[i];
                    c += dx * dh.transpose() * rule.cov_weights[i];
                }
                (eh, s, c)
            }
            FilterScheme::SigmaPointJacobian(rule) => {
                let factor = cov_factor(&state.cov)?;
                let pts = factor.transform_points(&state.mean, rule);
                let mut eh = DVector::zeros(d);
                let mut ehx = DMatrix::zeros(d, n);
                for (i, x) in pts.iter().enumerate() {
                    eh.axpy(rule.mean_weights[i], &meas.eval(x), 1.0);
                    ehx += meas.jacobian(x)? * rule.mean_weights[i];
                }
                let s = &ehx * &state.cov * ehx.transpose() + &meas.noise_cov;
                let c = &state.cov * ehx.transpose();
                (eh, s, c)
            }
        }
    };

    let s_cov = symmetrize(&s_cov);
    let chol = nalgebra::Cholesky::new(s_cov.clone()).ok_or(Error::NotPositiveDefinite {
        jitter: 0.0,
    })?;
    // K = C S^{-1}
    let k = chol.solve(&c_cov.transpose()).transpose();
    let innov = meas.wrap_residual(y, &eh);
    let mean = &state.mean + &k * innov;
    let cov = symmetrize(&(&state.cov - &k * s_cov * k.transpose()));
    Ok(GaussianState::new(mean, cov))
}

/// Run the filter over a grid, storing moments and cached drift expectations
/// at every node and pre/post pairs at measurement nodes.
pub fn run_filter(
    model: &SdeModel,
    meas: &MeasurementModel,
    records: &[MeasurementRecord],
    grid: &TimeGrid,
    prior: &GaussianState,
    scheme: &FilterScheme,
) -> Result<FilterTrajectory> {
    let n = model.state_dim;
    let meas_indices = grid.measurement_indices(records)?;

    let mut mean = GridFunction::from_fill(grid.clone(), DVector::zeros(n));
    let mut cov = GridFunction::from_fill(grid.clone(), DMatrix::zeros(n, n));
    let mut ef = GridFunction::from_fill(grid.clone(), DVector::zeros(n));
    let mut cross = GridFunction::from_fill(grid.clone(), DMatrix::zeros(n, n));
    let mut efx = GridFunction::from_fill(grid.clone(), DMatrix::zeros(n, n));

    let mut next_meas = 0usize;
    let mut m = prior.mean.clone();
    let mut p = symmetrize(&prior.cov);

    for i in 0..grid.len() {
        let t = grid.time(i);
        if i > 0 {
            let (mn, pn) = predict_step(model, scheme, &m, &p, grid.time(i - 1), grid.step)
                .map_err(|e| match e {
                    Error::Divergence { context, .. } => Error::Divergence {
                        t,
                        context: format!("filter prediction into node {i}: {context}"),
                    },
                    other => other,
                })?;
            m = mn;
            p = pn;
        }

        let is_meas = next_meas < meas_indices.len() && meas_indices[next_meas] == i;
        if is_meas {
            // store left limits before the update
            let st = GaussianState::new(m.clone(), p.clone());
            let ex = drift_expectations(model, scheme, &st, t)?;
            mean.set_pre(i, m.clone());
            cov.set_pre(i, p.clone());
            ef.set_pre(i, ex.ef);
            cross.set_pre(i, ex.cross);
            efx.set_pre(i, ex.efx);

            let updated = update(&st, meas, &records[next_meas].value, scheme)?;
            m = updated.mean;
            p = updated.cov;
            next_meas += 1;
        }

        let st = GaussianState::new(m.clone(), p.clone());
        let ex = drift_expectations(model, scheme, &st, t)?;
        mean.values[i] = m.clone();
        cov.values[i] = p.clone();
        ef.values[i] = ex.ef;
        cross.values[i] = ex.cross;
        efx.values[i] = ex.efx;
    }

    Ok(FilterTrajectory {
        grid: grid.clone(),
        mean,
        cov,
        ef,
        cross,
        efx,
        meas_indices,
        scheme_name: scheme.name().to_string(),
    })
}

/// Exact discrete-time Kalman filter for the scalar OU model, used as a test
/// oracle: transition `e^{-a dt}`, process variance `(1 - e^{-2 a dt}) q / (2a)`.
pub mod ou_oracle {
    use super::*;

    pub struct OuKalman {
        pub a: f64,
        pub q: f64,
        pub r: f64,
    }

    impl OuKalman {
        pub fn predict(&self, m: f64, p: f64, dt: f64) -> (f64, f64) {
            let phi = (-self.a * dt).exp();
            (phi * m, phi * phi * p + (1.0 - phi * phi) * self.q / (2.0 * self.a))
        }

        pub fn update(&self, m: f64, p: f64, y: f64) -> (f64, f64) {
            let s = p + self.r;
            let k = p / s;
            (m + k * (y - m), p - k * k * s)
        }

        /// Filtered (post-update where applicable) moments at every grid node.
        pub fn run(
            &self,
            grid: &TimeGrid,
            records: &[MeasurementRecord],
            m0: f64,
            p0: f64,
        ) -> Vec<(f64, f64)> {
            let idx: Vec<usize> = records
                .iter()
                .map(|r| grid.index_of(r.time).unwrap())
                .collect();
            let mut out = Vec::with_capacity(grid.len());
            let mut m = m0;
            let mut p = p0;
            let mut next = 0usize;
            for i in 0..grid.len() {
                if i > 0 {
                    let (mn, pn) = self.predict(m, p, grid.step);
                    m = mn;
                    p = pn;
                }
                if next < idx.len() && idx[next] == i {
                    let (mn, pn) = self.update(m, p, records[next].value[0]);
                    m = mn;
                    p = pn;
                    next += 1;
                }
                out.push((m, p));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_double_well, make_ou};
    use crate::odeint::{euler_maruyama, sample_measurements};
    use crate::quadrature::{cubature_rule, gauss_hermite_rule, unscented_rule};
    use approx::assert_relative_eq;

    fn scalar_state(m: f64, p: f64) -> GaussianState {
        GaussianState::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, p))
    }

    #[test]
    fn ou_prediction_matches_analytic_moments() {
        // dm/dt = -m, dP/dt = -2P + 2; with P(0)=1, P stays at 1.
        let (model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        for scheme in [
            FilterScheme::Ext,
            FilterScheme::SigmaPoint(gauss_hermite_rule(1, 3).unwrap()),
            FilterScheme::SigmaPointJacobian(cubature_rule(1)),
        ] {
            let out = predict(&model, &scheme, &scalar_state(1.0, 1.0), 0.0, 1.0, &grid).unwrap();
            assert_relative_eq!(out.mean[0], (-1.0f64).exp(), epsilon = 1e-6);
            assert_relative_eq!(out.cov[(0, 0)], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn pure_diffusion_prediction() {
        let (mut model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        model.drift = Box::new(|_x, _t| Ok(DVector::zeros(1)));
        model.drift_jacobian = Some(Box::new(|_x, _t| Ok(DMatrix::zeros(1, 1))));
        let grid = TimeGrid::new(0.0, 2.0, 0.01).unwrap();
        let out = predict(
            &model,
            &FilterScheme::Ext,
            &scalar_state(0.5, 0.3),
            0.0,
            2.0,
            &grid,
        )
        .unwrap();
        assert_relative_eq!(out.mean[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(out.cov[(0, 0)], 0.3 + 2.0 * 2.0, epsilon = 1e-10);
    }

    #[test]
    fn double_well_gh_matches_analytic_prediction() {
        let (model, _) = make_double_well(1.0, 0.1).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 0.01).unwrap();
        let start = scalar_state(0.3, 0.4);
        let a = predict(&model, &FilterScheme::Analytic, &start, 0.0, 0.5, &grid).unwrap();
        let g = predict(
            &model,
            &FilterScheme::SigmaPoint(gauss_hermite_rule(1, 7).unwrap()),
            &start,
            0.0,
            0.5,
            &grid,
        )
        .unwrap();
        assert_relative_eq!(a.mean[0], g.mean[0], epsilon = 1e-8);
        assert_relative_eq!(a.cov[(0, 0)], g.cov[(0, 0)], epsilon = 1e-8);
    }

    #[test]
    fn scalar_kalman_update() {
        let (_, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let out = update(
            &scalar_state(0.0, 1.0),
            &meas,
            &DVector::from_element(1, 2.0),
            &FilterScheme::Ext,
        )
        .unwrap();
        assert_relative_eq!(out.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.cov[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let (_, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let state = scalar_state(0.7, 2.0);
        let out = update(&state, &meas, &DVector::from_element(1, 0.7), &FilterScheme::Ext).unwrap();
        assert_relative_eq!(out.mean[0], 0.7, epsilon = 1e-12);
        assert!(out.cov[(0, 0)] < state.cov[(0, 0)]);
    }

    #[test]
    fn uninformative_measurement_keeps_state() {
        let (_, mut meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        meas.noise_cov = DMatrix::from_element(1, 1, 1e12);
        let state = scalar_state(0.7, 2.0);
        let out = update(&state, &meas, &DVector::from_element(1, 5.0), &FilterScheme::Ext).unwrap();
        assert_relative_eq!(out.mean[0], 0.7, epsilon = 1e-8);
        assert_relative_eq!(out.cov[(0, 0)], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn joseph_form_equivalence_linear() {
        let (_, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let state = scalar_state(0.4, 1.7);
        let y = DVector::from_element(1, -0.3);
        let out = update(&state, &meas, &y, &FilterScheme::Ext).unwrap();
        // Joseph form: (I - KH) P (I - KH)^T + K R K^T
        let p = 1.7;
        let r = 1.0;
        let s = p + r;
        let k = p / s;
        let joseph = (1.0 - k) * p * (1.0 - k) + k * r * k;
        assert_relative_eq!(out.cov[(0, 0)], joseph, epsilon = 1e-9);
    }

    #[test]
    fn no_measurements_is_pure_prediction() {
        let (model, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let prior = scalar_state(1.0, 1.0);
        let ft = run_filter(&model, &meas, &[], &grid, &prior, &FilterScheme::Ext).unwrap();
        let pred = predict(&model, &FilterScheme::Ext, &prior, 0.0, 1.0, &grid).unwrap();
        assert_relative_eq!(ft.mean.post(grid.n_steps)[0], pred.mean[0], epsilon = 1e-12);
        assert!(ft.mean.pre.is_empty());
    }

    #[test]
    fn ou_filter_matches_exact_kalman() {
        let (model, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 10.0, 0.01).unwrap();
        let sim = euler_maruyama(&model, &DVector::zeros(1), &grid, 11).unwrap();
        let times: Vec<f64> = (1..=20).map(|k| k as f64 * 0.5).collect();
        let records = sample_measurements(&sim, &meas, &times, 12).unwrap();
        let prior = scalar_state(0.0, 1.0);

        let oracle = ou_oracle::OuKalman { a: 1.0, q: 2.0, r: 1.0 };
        let exact = oracle.run(&grid, &records, 0.0, 1.0);

        for scheme in [
            FilterScheme::Ext,
            FilterScheme::SigmaPoint(cubature_rule(1)),
            FilterScheme::SigmaPoint(unscented_rule(1, 1.0, 2.0, 0.0).unwrap()),
            FilterScheme::SigmaPoint(gauss_hermite_rule(1, 3).unwrap()),
        ] {
            let ft = run_filter(&model, &meas, &records, &grid, &prior, &scheme).unwrap();
            for (i, (m, p)) in exact.iter().enumerate() {
                assert_relative_eq!(ft.mean.post(i)[0], *m, epsilon = 1e-5);
                assert_relative_eq!(ft.cov.post(i)[(0, 0)], *p, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn linear_schemes_agree() {
        let (model, meas) = make_ou(0.5, 1.0, 0.3).unwrap();
        let grid = TimeGrid::new(0.0, 4.0, 0.01).unwrap();
        let sim = euler_maruyama(&model, &DVector::zeros(1), &grid, 5).unwrap();
        let times: Vec<f64> = (1..=8).map(|k| k as f64 * 0.5).collect();
        let records = sample_measurements(&sim, &meas, &times, 6).unwrap();
        let prior = scalar_state(0.0, 1.0);

        let base = run_filter(&model, &meas, &records, &grid, &prior, &FilterScheme::Ext).unwrap();
        for scheme in [
            FilterScheme::SigmaPoint(cubature_rule(1)),
            FilterScheme::SigmaPoint(gauss_hermite_rule(1, 4).unwrap()),
            FilterScheme::SigmaPointJacobian(unscented_rule(1, 1.0, 2.0, 0.0).unwrap()),
        ] {
            let ft = run_filter(&model, &meas, &records, &grid, &prior, &scheme).unwrap();
            for i in 0..grid.len() {
                assert_relative_eq!(ft.mean.post(i)[0], base.mean.post(i)[0], epsilon = 1e-8);
                assert_relative_eq!(
                    ft.cov.post(i)[(0, 0)],
                    base.cov.post(i)[(0, 0)],
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn update_reduces_measured_variance() {
        let (_, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let state = scalar_state(0.0, 3.0);
        let out = update(&state, &meas, &DVector::from_element(1, 1.0), &FilterScheme::Ext).unwrap();
        assert!(out.cov[(0, 0)] <= state.cov[(0, 0)] + 1e-12);
    }
}
