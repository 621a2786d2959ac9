//! Trajectory metrics: time-averaged RMSE, negative log-likelihood, and
//! 95 %-consistency, with block-restricted variants and quantile aggregation
//! across Monte-Carlo runs.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::odeint::{GridFunction, SamplePath};

/// Upper 95 % quantiles of the chi-squared distribution for 1..=5 degrees of
/// freedom (squared Mahalanobis thresholds for the 95 % ellipsoid).
const CHI2_95: [f64; 5] = [3.8415, 5.9915, 7.8147, 9.4877, 11.0705];

pub fn chi2_95(dim: usize) -> Result<f64> {
    CHI2_95
        .get(dim.wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::config(format!("no chi-squared threshold tabulated for dim {dim}")))
}

/// Metrics of one estimated trajectory against the simulated truth. Block
/// rows carry the same three numbers restricted to a named component range.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub rmse: f64,
    pub nll: f64,
    pub consistency95: f64,
    pub blocks: Vec<BlockMetrics>,
}

#[derive(Debug, Clone)]
pub struct BlockMetrics {
    pub name: String,
    pub rmse: f64,
    pub nll: f64,
    pub consistency95: f64,
}

fn truth_at<'a>(truth: &'a SamplePath, t: f64) -> Result<&'a DVector<f64>> {
    Ok(&truth.states[truth.grid.index_of(t)?])
}

fn check_block(block: &Range<usize>, dim: usize) -> Result<()> {
    if block.start >= block.end || block.end > dim {
        return Err(Error::config(format!(
            "block {}..{} out of range for state dimension {dim}",
            block.start, block.end
        )));
    }
    Ok(())
}

/// `sqrt( (1/(t_K - t_0)) ∫ ||x(t) - m(t)||² dt )`, trapezoidal over the
/// estimation grid, restricted to the block components.
pub fn rmse(truth: &SamplePath, mean: &GridFunction<DVector<f64>>, block: Range<usize>) -> Result<f64> {
    let grid = &mean.grid;
    check_block(&block, mean.post(0).len())?;
    let sq = |i: usize| -> Result<f64> {
        let x = truth_at(truth, grid.time(i))?;
        let m = mean.post(i);
        Ok(block
            .clone()
            .map(|c| (x[c] - m[c]).powi(2))
            .sum())
    };
    let mut total = 0.0;
    for i in 0..grid.n_steps {
        total += 0.5 * grid.step * (sq(i)? + sq(i + 1)?);
    }
    Ok((total / (grid.step * grid.n_steps as f64)).sqrt())
}

/// `-ln N(x | m_blk, P_blk)` for the marginal of a block; components of the
/// block with exactly zero variance are dropped (degenerate marginals).
fn node_nll(
    x: &DVector<f64>,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    block: &Range<usize>,
    node: usize,
) -> Result<f64> {
    let live: Vec<usize> = block.clone().filter(|&c| p[(c, c)] > 0.0).collect();
    if live.is_empty() {
        return Err(Error::Singular {
            node,
            context: "all block variances are zero in nll".to_string(),
        });
    }
    let d = live.len();
    let sub = DMatrix::from_fn(d, d, |i, j| p[(live[i], live[j])]);
    let resid = DVector::from_fn(d, |i, _| x[live[i]] - m[live[i]]);
    let chol = nalgebra::Cholesky::new(sub).ok_or_else(|| Error::Singular {
        node,
        context: "covariance block not positive definite in nll".to_string(),
    })?;
    let logdet: f64 = chol.l().diagonal().map(|v| v.ln()).sum();
    let maha = chol.solve(&resid).dot(&resid);
    Ok(0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() + logdet + 0.5 * maha)
}

/// Time-averaged negative log-likelihood of the truth under the Gaussian
/// marginals, trapezoidal over the estimation grid.
pub fn nll(
    truth: &SamplePath,
    mean: &GridFunction<DVector<f64>>,
    cov: &GridFunction<DMatrix<f64>>,
    block: Range<usize>,
) -> Result<f64> {
    let grid = &mean.grid;
    check_block(&block, mean.post(0).len())?;
    let at = |i: usize| -> Result<f64> {
        node_nll(
            truth_at(truth, grid.time(i))?,
            mean.post(i),
            cov.post(i),
            &block,
            i,
        )
    };
    let mut total = 0.0;
    for i in 0..grid.n_steps {
        total += 0.5 * grid.step * (at(i)? + at(i + 1)?);
    }
    Ok(total / (grid.step * grid.n_steps as f64))
}

/// Fraction of grid nodes where the truth lies inside the 95 % ellipsoid of
/// `N(m_blk, P_blk)`.
pub fn consistency95(
    truth: &SamplePath,
    mean: &GridFunction<DVector<f64>>,
    cov: &GridFunction<DMatrix<f64>>,
    block: Range<usize>,
) -> Result<f64> {
    let grid = &mean.grid;
    check_block(&block, mean.post(0).len())?;
    let mut inside = 0usize;
    let mut counted = 0usize;
    for i in 0..grid.len() {
        let x = truth_at(truth, grid.time(i))?;
        let m = mean.post(i);
        let p = cov.post(i);
        let live: Vec<usize> = block.clone().filter(|&c| p[(c, c)] > 0.0).collect();
        if live.is_empty() {
            continue;
        }
        let d = live.len();
        let sub = DMatrix::from_fn(d, d, |a, b| p[(live[a], live[b])]);
        let resid = DVector::from_fn(d, |a, _| x[live[a]] - m[live[a]]);
        let chol = nalgebra::Cholesky::new(sub).ok_or_else(|| Error::Singular {
            node: i,
            context: "covariance block not positive definite in consistency".to_string(),
        })?;
        let maha = chol.solve(&resid).dot(&resid);
        counted += 1;
        if maha <= chi2_95(d)? {
            inside += 1;
        }
    }
    if counted == 0 {
        return Err(Error::config("no nodes with positive variance in block"));
    }
    Ok(inside as f64 / counted as f64)
}

/// All three metrics for the full state plus the requested blocks.
pub fn run_metrics(
    truth: &SamplePath,
    mean: &GridFunction<DVector<f64>>,
    cov: &GridFunction<DMatrix<f64>>,
    blocks: &[(String, Range<usize>)],
) -> Result<RunMetrics> {
    let n = mean.post(0).len();
    let full = 0..n;
    let mut out = RunMetrics {
        rmse: rmse(truth, mean, full.clone())?,
        nll: nll(truth, mean, cov, full.clone())?,
        consistency95: consistency95(truth, mean, cov, full)?,
        blocks: Vec::new(),
    };
    for (name, range) in blocks {
        out.blocks.push(BlockMetrics {
            name: name.clone(),
            rmse: rmse(truth, mean, range.clone())?,
            nll: nll(truth, mean, cov, range.clone())?,
            consistency95: consistency95(truth, mean, cov, range.clone())?,
        });
    }
    Ok(out)
}

/// Component ranges matching the reentry state layout.
pub fn reentry_blocks() -> Vec<(String, Range<usize>)> {
    vec![
        ("position".to_string(), 0..2),
        ("velocity".to_string(), 2..4),
        ("parameter".to_string(), 4..5),
    ]
}

/// Mean and 5/25/50/75/95 % quantiles of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// Linear interpolation of order statistics (type-7 quantile).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::config("cannot aggregate an empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q05: quantile(&sorted, 0.05),
        q25: quantile(&sorted, 0.25),
        q50: quantile(&sorted, 0.50),
        q75: quantile(&sorted, 0.75),
        q95: quantile(&sorted, 0.95),
    })
}
