//! Fixed-step time grids, grid-indexed function storage, RK4 integration and
//! Euler-Maruyama simulation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{MeasurementModel, MeasurementRecord, SdeModel};
use crate::quadrature::cov_factor;

/// Uniform time grid on [t0, tK].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub step: f64,
    /// Number of steps; the grid has `n_steps + 1` nodes.
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, step: f64) -> Result<Self> {
        if step <= 0.0 || t_end <= t0 {
            return Err(Error::config("time grid requires step > 0 and t_end > t0"));
        }
        let ratio = (t_end - t0) / step;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config(format!(
                "(t_end - t0)/step = {ratio} is not an integer"
            )));
        }
        Ok(TimeGrid {
            t0,
            step,
            n_steps: n as usize,
        })
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.step
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// Grid index of a time, required to lie on a node within 1e-9 * step.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let ratio = (t - self.t0) / self.step;
        let i = ratio.round();
        if (ratio - i).abs() > 1e-9 || i < 0.0 || i as usize > self.n_steps {
            return Err(Error::config(format!("time {t} is not on the grid")));
        }
        Ok(i as usize)
    }

    pub fn measurement_indices(&self, records: &[MeasurementRecord]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(records.len());
        let mut prev = None;
        for r in records {
            let i = self.index_of(r.time)?;
            if let Some(p) = prev {
                if i <= p {
                    return Err(Error::config("measurement times must be strictly increasing"));
                }
            }
            prev = Some(i);
            out.push(i);
        }
        Ok(out)
    }
}

/// Linear and four-point affine combinations between grid values.
pub trait Lerp: Clone {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self;
    /// c0*a + c1*b + c2*c + c3*d (used by the cubic interpolant).
    fn comb4(c0: f64, a: &Self, c1: f64, b: &Self, c2: f64, c: &Self, c3: f64, d: &Self) -> Self;
}

impl Lerp for f64 {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }

    fn comb4(c0: f64, a: &Self, c1: f64, b: &Self, c2: f64, c: &Self, c3: f64, d: &Self) -> Self {
        c0 * a + c1 * b + c2 * c + c3 * d
    }
}

impl Lerp for DVector<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }

    fn comb4(c0: f64, a: &Self, c1: f64, b: &Self, c2: f64, c: &Self, c3: f64, d: &Self) -> Self {
        a * c0 + b * c1 + c * c2 + d * c3
    }
}

impl Lerp for DMatrix<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }

    fn comb4(c0: f64, a: &Self, c1: f64, b: &Self, c2: f64, c: &Self, c3: f64, d: &Self) -> Self {
        a * c0 + b * c1 + c * c2 + d * c3
    }
}

/// Values stored at every grid node, with optional left-limit values at jump
/// nodes (measurement times). `values[i]` holds the right limit at node `i`.
#[derive(Debug, Clone)]
pub struct GridFunction<T> {
    pub grid: TimeGrid,
    pub values: Vec<T>,
    pub pre: BTreeMap<usize, T>,
}

impl<T: Lerp> GridFunction<T> {
    pub fn new(grid: TimeGrid, values: Vec<T>) -> Self {
        assert_eq!(values.len(), grid.len());
        GridFunction {
            grid,
            values,
            pre: BTreeMap::new(),
        }
    }

    pub fn from_fill(grid: TimeGrid, value: T) -> Self {
        let n = grid.len();
        GridFunction::new(grid, vec![value; n])
    }

    /// Right-limit value at node i.
    pub fn post(&self, i: usize) -> &T {
        &self.values[i]
    }

    /// Left-limit value at node i (falls back to the stored value).
    pub fn pre(&self, i: usize) -> &T {
        self.pre.get(&i).unwrap_or(&self.values[i])
    }

    pub fn set_pre(&mut self, i: usize, value: T) {
        self.pre.insert(i, value);
    }

    /// Interpolated value at time t within segment [node seg, node seg+1],
    /// using the right limit at the left node and the left limit at the right node.
    ///
    /// Uses a Catmull-Rom cubic where both neighbouring nodes lie on the same
    /// continuous piece (no stored left limit, i.e. no jump, at the stencil's
    /// interior nodes); falls back to linear interpolation next to jumps and
    /// grid boundaries. Linear interpolation alone caps the RK4 passes that
    /// sample between nodes at second order.
    pub fn at_within(&self, seg: usize, t: f64) -> T {
        let t0 = self.grid.time(seg);
        let w = ((t - t0) / self.grid.step).clamp(0.0, 1.0);
        if w <= 0.0 {
            return self.post(seg).clone();
        }
        if w >= 1.0 {
            return self.pre(seg + 1).clone();
        }
        let f1 = self.post(seg);
        let f2 = self.pre(seg + 1);
        let left = (seg >= 1 && !self.pre.contains_key(&seg)).then(|| self.post(seg - 1));
        let right = (seg + 2 < self.grid.len() && !self.pre.contains_key(&(seg + 1)))
            .then(|| self.pre(seg + 2));
        match (left, right) {
            (Some(f0), Some(f3)) => {
                let w2 = w * w;
                let w3 = w2 * w;
                T::comb4(
                    0.5 * (-w + 2.0 * w2 - w3),
                    f0,
                    0.5 * (2.0 - 5.0 * w2 + 3.0 * w3),
                    f1,
                    0.5 * (w + 4.0 * w2 - 3.0 * w3),
                    f2,
                    0.5 * (w3 - w2),
                    f3,
                )
            }
            _ => Lerp::lerp(f1, f2, w),
        }
    }

    /// Interpolated value at an arbitrary time (uses the containing segment).
    pub fn at(&self, t: f64) -> T {
        let raw = (t - self.grid.t0) / self.grid.step;
        let seg = (raw.floor().max(0.0) as usize).min(self.grid.n_steps.saturating_sub(1));
        self.at_within(seg, t)
    }
}

/// State that an RK4 step can operate on.
pub trait OdeState: Clone {
    /// self += a * other
    fn axpy_state(&mut self, a: f64, other: &Self);
    fn all_finite(&self) -> bool;
}

impl OdeState for DVector<f64> {
    fn axpy_state(&mut self, a: f64, other: &Self) {
        self.axpy(a, other, 1.0);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl OdeState for DMatrix<f64> {
    fn axpy_state(&mut self, a: f64, other: &Self) {
        *self += other * a;
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn axpy_state(&mut self, a: f64, other: &Self) {
        self.0.axpy_state(a, &other.0);
        self.1.axpy_state(a, &other.1);
    }
    fn all_finite(&self) -> bool {
        self.0.all_finite() && self.1.all_finite()
    }
}

/// One classical RK4 step of size `dt` (which may be negative).
pub fn rk4_step<S, F>(deriv: &mut F, t: f64, dt: f64, y: &S) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let k1 = deriv(t, y)?;
    let mut y2 = y.clone();
    y2.axpy_state(dt / 2.0, &k1);
    let k2 = deriv(t + dt / 2.0, &y2)?;
    let mut y3 = y.clone();
    y3.axpy_state(dt / 2.0, &k2);
    let k3 = deriv(t + dt / 2.0, &y3)?;
    let mut y4 = y.clone();
    y4.axpy_state(dt, &k3);
    let k4 = deriv(t + dt, &y4)?;

    let mut out = y.clone();
    out.axpy_state(dt / 6.0, &k1);
    out.axpy_state(dt / 3.0, &k2);
    out.axpy_state(dt / 3.0, &k3);
    out.axpy_state(dt / 6.0, &k4);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Integrate an ODE over the whole grid with one RK4 step per grid segment.
///
/// Forward starts from `y0` at the first node; backward starts from `y0` at
/// the last node and steps with negated step size.
pub fn rk4_integrate<S, F>(
    mut deriv: F,
    y0: S,
    grid: &TimeGrid,
    direction: Direction,
) -> Result<GridFunction<S>>
where
    S: OdeState + Lerp,
    F: FnMut(f64, &S) -> Result<S>,
{
    let n = grid.len();
    let mut values: Vec<Option<S>> = vec![None; n];
    match direction {
        Direction::Forward => {
            let mut y = y0;
            values[0] = Some(y.clone());
            for i in 0..grid.n_steps {
                let t = grid.time(i);
                y = rk4_step(&mut deriv, t, grid.step, &y)?;
                if !y.all_finite() {
                    return Err(Error::Divergence {
                        t: grid.time(i + 1),
                        context: format!("rk4 forward at node {}", i + 1),
                    });
                }
                values[i + 1] = Some(y.clone());
            }
        }
        Direction::Backward => {
            let mut y = y0;
            values[n - 1] = Some(y.clone());
            for i in (0..grid.n_steps).rev() {
                let t = grid.time(i + 1);
                y = rk4_step(&mut deriv, t, -grid.step, &y)?;
                if !y.all_finite() {
                    return Err(Error::Divergence {
                        t: grid.time(i),
                        context: format!("rk4 backward at node {i}"),
                    });
                }
                values[i] = Some(y.clone());
            }
        }
    }
    Ok(GridFunction::new(
        grid.clone(),
        values.into_iter().map(|v| v.unwrap()).collect(),
    ))
}

/// A simulated sample path on a grid.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
    pub seed: u64,
}

impl SamplePath {
    pub fn state_at(&self, t: f64) -> Result<&DVector<f64>> {
        Ok(&self.states[self.grid.index_of(t)?])
    }
}

/// Euler-Maruyama simulation: `x_{i+1} = x_i + f dt + L chol(Q dt) z`.
pub fn euler_maruyama(
    model: &SdeModel,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    seed: u64,
) -> Result<SamplePath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(grid.len());
    let mut x = x0.clone();
    states.push(x.clone());
    for i in 0..grid.n_steps {
        let t = grid.time(i);
        let f = model.drift(&x, t)?;
        let l = (model.dispersion)(t);
        let q = (model.diffusion)(t);
        let w = q.ncols();
        let sq = cov_factor(&(q * grid.step))?;
        let z = DVector::from_iterator(w, (0..w).map(|_| StandardNormal.sample(&mut rng)));
        x += f * grid.step + l * (&sq.l * z);
        if !x.all_finite() {
            return Err(Error::Divergence {
                t: grid.time(i + 1),
                context: format!("euler-maruyama at node {}", i + 1),
            });
        }
        states.push(x.clone());
    }
    Ok(SamplePath {
        grid: grid.clone(),
        states,
        seed,
    })
}

/// Draw noisy measurements of a sample path at the given times.
pub fn sample_measurements(
    path: &SamplePath,
    meas: &MeasurementModel,
    times: &[f64],
    seed: u64,
) -> Result<Vec<MeasurementRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chol = cov_factor(&meas.noise_cov)?;
    let d = meas.meas_dim;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let x = path.state_at(t)?;
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
        let mut y = meas.eval(x) + &chol.l * z;
        for &i in &meas.angle_indices {
            y[i] = crate::models::wrap_angle(y[i]);
        }
        out.push(MeasurementRecord { time: t, value: y });
    }
    Ok(out)
}
