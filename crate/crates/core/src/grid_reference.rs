//! Finite-difference smoothing oracle for 1-D models: the state space is
//! discretized into cells, the SDE into a Markov chain on the cell centers
//! (Euler–Maruyama transition kernel), and the exact Bayesian smoother is
//! realized by HMM forward–backward recursions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{effective_diffusion, MeasurementModel, MeasurementRecord, SdeModel};
use crate::odeint::{SamplePath, TimeGrid};

/// Uniform 1-D state grid of cell centers.
#[derive(Debug, Clone)]
pub struct StateGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl StateGrid {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_max > x_min) || n_cells < 2 {
            return Err(Error::config(
                "state grid requires x_max > x_min and at least 2 cells",
            ));
        }
        Ok(StateGrid {
            x_min,
            x_max,
            n_cells,
        })
    }

    /// Defaults used for the double-well reference.
    pub fn default_double_well() -> Self {
        StateGrid {
            x_min: -3.0,
            x_max: 3.0,
            n_cells: 601,
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_cells - 1) as f64
    }

    pub fn center(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|j| self.center(j)).collect()
    }

    /// Cell-center density of `N(mean, var)`, normalized so that `Σ p·dx = 1`.
    pub fn discretize_gaussian(&self, mean: f64, var: f64) -> DVector<f64> {
        let mut p = DVector::from_fn(self.n_cells, |j, _| {
            let z = self.center(j) - mean;
            (-0.5 * z * z / var).exp()
        });
        let mass = p.sum() * self.dx();
        p /= mass;
        p
    }
}

/// Filtering and smoothing densities (values at cell centers, normalized to
/// unit mass) at every time node.
pub struct GridPosterior {
    pub grid: StateGrid,
    pub times: TimeGrid,
    pub filtering: Vec<DVector<f64>>,
    pub smoothing: Vec<DVector<f64>>,
}

/// Row-stochastic transition matrix of the discretized chain:
/// `T[i][j] ∝ N(x_j | x_i + f(x_i) dt, Σ dt) · dx`.
pub fn build_transition(model: &SdeModel, dt: f64, grid: &StateGrid) -> Result<DMatrix<f64>> {
    if model.state_dim != 1 {
        return Err(Error::config(
            "grid reference supports only 1-D state models",
        ));
    }
    let sigma = effective_diffusion(model, 0.0)?[(0, 0)];
    let var = sigma * dt;
    let dx = grid.dx();
    if var.sqrt() < dx {
        return Err(Error::config(format!(
            "diffusion not resolvable: sqrt(Σ dt) = {:.3e} < dx = {:.3e}; use a finer dt or coarser grid",
            var.sqrt(),
            dx
        )));
    }
    let centers = grid.centers();
    let mut t = DMatrix::zeros(grid.n_cells, grid.n_cells);
    for i in 0..grid.n_cells {
        let xi = DVector::from_element(1, centers[i]);
        let mu = centers[i] + model.drift(&xi, 0.0)?[0] * dt;
        let mut row_sum = 0.0;
        for j in 0..grid.n_cells {
            let z = centers[j] - mu;
            let w = (-0.5 * z * z / var).exp();
            t[(i, j)] = w;
            row_sum += w;
        }
        if row_sum <= 0.0 {
            return Err(Error::config(format!(
                "transition row {i} has zero mass; drift pushes outside the state grid"
            )));
        }
        for j in 0..grid.n_cells {
            t[(i, j)] /= row_sum;
        }
    }
    Ok(t)
}

fn likelihood(meas: &MeasurementModel, grid: &StateGrid, y: &DVector<f64>) -> DVector<f64> {
    let r = meas.noise_cov[(0, 0)];
    DVector::from_fn(grid.n_cells, |j, _| {
        let h = meas.eval(&DVector::from_element(1, grid.center(j)))[0];
        let z = y[0] - h;
        (-0.5 * z * z / r).exp()
    })
}

fn normalize(p: &mut DVector<f64>, dx: f64, node: usize) -> Result<()> {
    let mass = p.sum() * dx;
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Singular {
            node,
            context: "grid density lost all mass".to_string(),
        });
    }
    *p /= mass;
    Ok(())
}

/// HMM forward–backward smoother on the discretized chain. The prior is a
/// density over cell centers; measurement times must lie on the time lattice.
pub fn forward_backward(
    transition: &DMatrix<f64>,
    prior_density: &DVector<f64>,
    records: &[MeasurementRecord],
    meas: &MeasurementModel,
    grid: &StateGrid,
    times: &TimeGrid,
) -> Result<GridPosterior> {
    let n = grid.n_cells;
    let dx = grid.dx();
    if prior_density.len() != n {
        return Err(Error::config("prior density size does not match state grid"));
    }
    let meas_indices = times.measurement_indices(records)?;
    let lik_at = |node: usize| -> Option<DVector<f64>> {
        meas_indices
            .iter()
            .position(|&i| i == node)
            .map(|k| likelihood(meas, grid, &records[k].value))
    };

    // forward: α_i(x) ∝ p(x(t_i) | y up to t_i)
    let mut filtering = Vec::with_capacity(times.len());
    let mut alpha = prior_density.clone();
    if let Some(l) = lik_at(0) {
        alpha.component_mul_assign(&l);
    }
    normalize(&mut alpha, dx, 0)?;
    filtering.push(alpha.clone());
    for i in 1..times.len() {
        alpha = transition.transpose() * alpha;
        if let Some(l) = lik_at(i) {
            alpha.component_mul_assign(&l);
        }
        normalize(&mut alpha, dx, i)?;
        filtering.push(alpha.clone());
    }

    // backward: β_i(x) ∝ p(future measurements | x(t_i)); rescaled each step
    let mut beta = DVector::from_element(n, 1.0);
    let mut smoothing = vec![DVector::zeros(n); times.len()];
    let mut gamma = filtering[times.len() - 1].clone();
    normalize(&mut gamma, dx, times.len() - 1)?;
    smoothing[times.len() - 1] = gamma;
    for i in (0..times.len() - 1).rev() {
        let mut msg = beta;
        if let Some(l) = lik_at(i + 1) {
            msg.component_mul_assign(&l);
        }
        beta = transition * msg;
        let scale = beta.max();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Singular {
                node: i,
                context: "backward message lost all mass".to_string(),
            });
        }
        beta /= scale;
        let mut gamma = filtering[i].component_mul(&beta);
        normalize(&mut gamma, dx, i)?;
        smoothing[i] = gamma;
    }

    Ok(GridPosterior {
        grid: grid.clone(),
        times: times.clone(),
        filtering,
        smoothing,
    })
}

/// Mean and variance of a cell-center density.
pub fn moments(density: &DVector<f64>, grid: &StateGrid) -> (f64, f64) {
    let dx = grid.dx();
    let mass: f64 = density.sum() * dx;
    let mean: f64 = (0..grid.n_cells)
        .map(|j| grid.center(j) * density[j] * dx)
        .sum::<f64>()
        / mass;
    let var: f64 = (0..grid.n_cells)
        .map(|j| {
            let z = grid.center(j) - mean;
            z * z * density[j] * dx
        })
        .sum::<f64>()
        / mass;
    (mean, var)
}

/// Density value at `x` by linear interpolation between cell centers
/// (zero outside the grid).
pub fn density_at(density: &DVector<f64>, grid: &StateGrid, x: f64) -> f64 {
    let dx = grid.dx();
    let pos = (x - grid.x_min) / dx;
    if pos < 0.0 || pos > (grid.n_cells - 1) as f64 {
        return 0.0;
    }
    let j = (pos.floor() as usize).min(grid.n_cells - 2);
    let w = pos - j as f64;
    density[j] * (1.0 - w) + density[j + 1] * w
}

/// Time-averaged negative log of the smoothing density along the true path
/// (trapezoidal over the time grid).
pub fn nll_of_path(path: &SamplePath, posterior: &GridPosterior) -> Result<f64> {
    let times = &posterior.times;
    if path.grid.len() != times.len() {
        return Err(Error::config(
            "sample path grid does not match the reference time grid",
        ));
    }
    let floor = 1e-300;
    let node_nll = |i: usize| -> f64 {
        let p = density_at(&posterior.smoothing[i], &posterior.grid, path.states[i][0]);
        -(p.max(floor)).ln()
    };
    let mut total = 0.0;
    for i in 0..times.n_steps {
        total += 0.5 * times.step * (node_nll(i) + node_nll(i + 1));
    }
    Ok(total / (times.step * times.n_steps as f64))
}

/// Full pipeline for a 1-D model: transition kernel, forward–backward, done.
pub fn run_reference(
    model: &SdeModel,
    meas: &MeasurementModel,
    records: &[MeasurementRecord],
    times: &TimeGrid,
    prior_mean: f64,
    prior_var: f64,
    grid: &StateGrid,
) -> Result<GridPosterior> {
    let transition = build_transition(model, times.step, grid)?;
    let prior = grid.discretize_gaussian(prior_mean, prior_var);
    forward_backward(&transition, &prior, records, meas, grid, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cd_filter::ou_oracle::OuKalman;
    use crate::cd_smoother::rts_oracle;
    use crate::models::{make_double_well, make_ou};
    use crate::odeint::{euler_maruyama, sample_measurements};
    use approx::assert_relative_eq;

    fn ou_grid() -> StateGrid {
        StateGrid::new(-4.0, 4.0, 401).unwrap()
    }

    #[test]
    fn transition_rows_are_stochastic_and_symmetric_for_zero_drift() {
        let (mut model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        model.drift = Box::new(|_x, _t| Ok(DVector::zeros(1)));
        let grid = ou_grid();
        let t = build_transition(&model, 0.01, &grid).unwrap();
        for i in 0..grid.n_cells {
            assert_relative_eq!(t.row(i).sum(), 1.0, epsilon = 1e-10);
        }
        // zero drift: row centered at x_i is symmetric about it
        let i = 200; // center cell, x = 0
        for off in 1..5 {
            assert_relative_eq!(t[(i, i - off)], t[(i, i + off)], epsilon = 1e-12);
        }
    }

    #[test]
    fn resolution_check_rejects_coarse_grids() {
        let (model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        let coarse = StateGrid::new(-4.0, 4.0, 21).unwrap(); // dx = 0.4 >> sqrt(0.02)
        assert!(build_transition(&model, 0.01, &coarse).is_err());
    }

    #[test]
    fn chapman_kolmogorov_error_halves_with_resolution() {
        let (model, _) = make_ou(1.0, 2.0, 1.0).unwrap();
        // defect measured as the worst per-row total variation, which is
        // invariant to the cell width
        let err = |n_cells: usize, dt: f64| -> f64 {
            let grid = StateGrid::new(-4.0, 4.0, n_cells).unwrap();
            let t_full = build_transition(&model, dt, &grid).unwrap();
            let t_half = build_transition(&model, dt / 2.0, &grid).unwrap();
            let diff = &t_half * &t_half - t_full;
            // interior rows only: boundary truncation adds an O(1) error
            // independent of the step sizes
            (n_cells / 4..3 * n_cells / 4)
                .map(|i| diff.row(i).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0_f64, f64::max)
        };
        let coarse = err(201, 0.04);
        let fine = err(401, 0.02);
        assert!(
            fine * 2.0 <= coarse,
            "halving dx and dt should at least halve the CK defect: {coarse} -> {fine}"
        );
    }

    #[test]
    fn discretized_gaussian_moments() {
        let grid = StateGrid::new(-8.0, 8.0, 1601).unwrap();
        let p = grid.discretize_gaussian(0.0, 1.0);
        let (mean, var) = moments(&p, &grid);
        assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
        assert_relative_eq!(var, 1.0, epsilon = 1e-3);
        assert_relative_eq!(p.sum() * grid.dx(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_filter_matches_kalman_on_ou() {
        let (model, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let times = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let sim = euler_maruyama(&model, &DVector::zeros(1), &times, 11).unwrap();
        let records = sample_measurements(&sim, &meas, &[0.25, 0.5, 0.75], 12).unwrap();
        let grid = ou_grid();
        let post = run_reference(&model, &meas, &records, &times, 0.0, 1.0, &grid).unwrap();
        let oracle = OuKalman { a: 1.0, q: 2.0, r: 1.0 };
        let kalman = oracle.run(&times, &records, 0.0, 1.0);
        // mean after 100 steps (with updates) within 2 dx of exact Kalman
        let (mean, var) = moments(&post.filtering[100], &grid);
        assert!(
            (mean - kalman[100].0).abs() < 2.0 * grid.dx(),
            "grid filter mean {mean} vs kalman {}",
            kalman[100].0
        );
        assert!((var - kalman[100].1).abs() < 0.05);
    }

    #[test]
    fn grid_smoother_matches_rts_on_ou() {
        let (model, meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        let times = TimeGrid::new(0.0, 2.0, 0.01).unwrap();
        let sim = euler_maruyama(&model, &DVector::zeros(1), &times, 21).unwrap();
        let meas_times: Vec<f64> = (1..=8).map(|k| k as f64 * 0.25).collect();
        let records = sample_measurements(&sim, &meas, &meas_times, 22).unwrap();
        let grid = ou_grid();
        let post = run_reference(&model, &meas, &records, &times, 0.0, 1.0, &grid).unwrap();
        let oracle = OuKalman { a: 1.0, q: 2.0, r: 1.0 };
        let filtered = oracle.run(&times, &records, 0.0, 1.0);
        let smoothed = rts_oracle::smooth(1.0, 2.0, times.step, &filtered);
        for i in (0..times.len()).step_by(20) {
            let (mean, _) = moments(&post.smoothing[i], &grid);
            assert!(
                (mean - smoothed[i].0).abs() < 2.0 * grid.dx(),
                "node {i}: grid {mean} vs rts {}",
                smoothed[i].0
            );
        }
    }

    #[test]
    fn no_measurements_smoothing_equals_filtering() {
        let (model, meas) = make_double_well(1.0, 0.1).unwrap();
        let times = TimeGrid::new(0.0, 0.5, 0.01).unwrap();
        let grid = StateGrid::default_double_well();
        let post = run_reference(&model, &meas, &[], &times, 0.0, 0.25, &grid).unwrap();
        for i in 0..times.len() {
            assert!(
                (&post.smoothing[i] - &post.filtering[i]).amax() < 1e-9,
                "node {i}"
            );
        }
    }

    #[test]
    fn sharp_measurement_collapses_density() {
        let (model, mut meas) = make_ou(1.0, 2.0, 1.0).unwrap();
        meas.noise_cov = DMatrix::from_element(1, 1, 1e-6);
        let times = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let records = vec![MeasurementRecord {
            time: 0.5,
            value: DVector::from_element(1, 1.0),
        }];
        let grid = ou_grid();
        let post = run_reference(&model, &meas, &records, &times, 0.0, 1.0, &grid).unwrap();
        let node = times.index_of(0.5).unwrap();
        let (mean, var) = moments(&post.smoothing[node], &grid);
        assert!((mean - 1.0).abs() < 2.0 * grid.dx());
        assert!(var < 1e-4);
    }

    #[test]
    fn nll_of_uniform_density_is_zero() {
        let grid = StateGrid::new(0.0, 1.0, 101).unwrap();
        let times = TimeGrid::new(0.0, 1.0, 0.1).unwrap();
        let uniform = DVector::from_element(grid.n_cells, 1.0);
        let post = GridPosterior {
            grid: grid.clone(),
            times: times.clone(),
            filtering: vec![uniform.clone(); times.len()],
            smoothing: vec![uniform; times.len()],
        };
        let path = SamplePath {
            grid: times.clone(),
            states: vec![DVector::from_element(1, 0.5); times.len()],
            seed: 0,
        };
        assert_relative_eq!(nll_of_path(&path, &post).unwrap(), 0.0, epsilon = 1e-12);
    }
}
