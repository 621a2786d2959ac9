//! Experiment harness: configuration, seeded Monte-Carlo pipeline
//! (simulate → filter → Type II smooth → variational smoother), metric
//! tables and CSV emission.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cd_filter::{run_filter, FilterScheme, FilterTrajectory};
use crate::cd_smoother::{export_variational, smooth_type2, SmootherTrajectory};
use crate::error::{Error, Result};
use crate::grid_reference::{run_reference, GridPosterior, StateGrid};
use crate::metrics::{aggregate, quantile, reentry_blocks, run_metrics, RunMetrics};
use crate::models::{
    make_double_well, make_ou, make_reentry, reentry_estimation_prior, reentry_truth_prior,
    GaussianState, MeasurementModel, MeasurementRecord, SdeModel,
};
use crate::odeint::{euler_maruyama, sample_measurements, SamplePath, TimeGrid};
use crate::quadrature::{cov_factor, cubature_rule, gauss_hermite_rule, unscented_rule};
use crate::vgs_core::{run_vgs, VgsConfig, VgsResult};
use crate::vgs_expect::{build_engine, EngineParams};

/// One experiment: model, time discretization, measurement schedule,
/// methods × engines, Monte-Carlo scale and seeding.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "double_well", "reentry" or "ou".
    pub model: String,
    pub t0: f64,
    pub t_end: f64,
    /// Euler-Maruyama step for the simulated truth.
    pub sim_step: f64,
    /// RK4 step for the estimators.
    pub est_step: f64,
    /// Measurement period; ignored when `meas_times` is nonempty.
    pub meas_interval: f64,
    pub meas_times: Vec<f64>,
    /// Measurement-variance sweep (double well / OU). The reentry radar noise
    /// is part of the model and this list is ignored there.
    pub meas_vars: Vec<f64>,
    /// Subset of ["gfgs", "vgs"].
    pub methods: Vec<String>,
    /// Engine names: analytic, ext, ct, ut, gh, ct2, ut2, gh2.
    pub engines: Vec<String>,
    pub runs: usize,
    pub seed: u64,
    /// Double-well diffusion constant.
    pub sigma: f64,
    pub ou_a: f64,
    pub ou_q: f64,
    pub ut_alpha: f64,
    pub ut_beta: f64,
    pub ut_kappa: f64,
    pub gh_order: usize,
    pub vgs_max_iters: usize,
    pub vgs_kl_tol: f64,
    /// RK4 substeps per estimation-grid segment in the variational passes.
    pub vgs_substeps: usize,
    /// 1-D grid-reference settings.
    pub ref_x_min: f64,
    pub ref_x_max: f64,
    pub ref_n_cells: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "double_well".to_string(),
            t0: 0.0,
            t_end: 10.0,
            sim_step: 0.01,
            est_step: 0.01,
            meas_interval: 1.0,
            meas_times: Vec::new(),
            meas_vars: vec![0.1],
            methods: vec!["gfgs".to_string(), "vgs".to_string()],
            engines: vec!["analytic".to_string()],
            runs: 20,
            seed: 1,
            sigma: 1.0,
            ou_a: 1.0,
            ou_q: 2.0,
            ut_alpha: 1.0,
            ut_beta: 2.0,
            ut_kappa: 0.0,
            gh_order: 3,
            vgs_max_iters: 200,
            vgs_kl_tol: 1e-3,
            vgs_substeps: 1,
            ref_x_min: -3.0,
            ref_x_max: 3.0,
            ref_n_cells: 601,
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "double_well" => Ok(ExperimentConfig::default()),
            "reentry" => Ok(ExperimentConfig {
                model: "reentry".to_string(),
                t_end: 200.0,
                sim_step: 0.01,
                est_step: 0.1,
                meas_interval: 1.0,
                meas_vars: Vec::new(),
                engines: vec![
                    "ext".to_string(),
                    "ct2".to_string(),
                    "ut2".to_string(),
                    "gh".to_string(),
                ],
                runs: 10,
                vgs_substeps: 5,
                ..ExperimentConfig::default()
            }),
            "ou" => Ok(ExperimentConfig {
                model: "ou".to_string(),
                meas_vars: vec![1.0],
                engines: vec!["ext".to_string()],
                meas_interval: 0.5,
                ..ExperimentConfig::default()
            }),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs must be >= 1"));
        }
        if self.methods.is_empty() || self.engines.is_empty() {
            return Err(Error::config("need at least one method and one engine"));
        }
        for m in &self.methods {
            if m != "gfgs" && m != "vgs" {
                return Err(Error::config(format!("unknown method '{m}'")));
            }
        }
        if self.model != "double_well" && self.model != "reentry" && self.model != "ou" {
            return Err(Error::config(format!("unknown model '{}'", self.model)));
        }
        if self.model != "reentry" && self.meas_vars.is_empty() && self.meas_times.is_empty() {
            return Err(Error::config("meas_vars must be nonempty for this model"));
        }
        // fail fast on bad grids and schedules
        let _ = self.est_grid()?;
        let _ = self.sim_grid()?;
        self.measurement_times();
        Ok(())
    }

    pub fn sim_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, self.t_end, self.sim_step)
    }

    pub fn est_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, self.t_end, self.est_step)
    }

    pub fn measurement_times(&self) -> Vec<f64> {
        if !self.meas_times.is_empty() {
            return self.meas_times.clone();
        }
        let mut times = Vec::new();
        let mut k = 1usize;
        loop {
            let t = self.t0 + k as f64 * self.meas_interval;
            if t > self.t_end + 1e-9 {
                break;
            }
            times.push(t.min(self.t_end));
            k += 1;
        }
        times
    }

    pub fn engine_params(&self) -> EngineParams {
        EngineParams {
            ut_alpha: self.ut_alpha,
            ut_beta: self.ut_beta,
            ut_kappa: self.ut_kappa,
            gh_order: self.gh_order,
        }
    }

    pub fn vgs_config(&self) -> VgsConfig {
        VgsConfig {
            max_iters: self.vgs_max_iters,
            kl_tol: self.vgs_kl_tol,
            substeps: self.vgs_substeps,
            ..VgsConfig::default()
        }
    }

    /// Variance sweep; the reentry model carries its own radar noise.
    pub fn variance_sweep(&self) -> Vec<Option<f64>> {
        if self.model == "reentry" {
            vec![None]
        } else {
            self.meas_vars.iter().copied().map(Some).collect()
        }
    }
}

/// Model instance plus the priors used for simulation and estimation.
pub struct ModelInstance {
    pub model: SdeModel,
    pub meas: MeasurementModel,
    pub truth_prior: GaussianState,
    pub est_prior: GaussianState,
    pub blocks: Vec<(String, Range<usize>)>,
}

pub fn build_model(config: &ExperimentConfig, meas_var: Option<f64>) -> Result<ModelInstance> {
    match config.model.as_str() {
        "double_well" => {
            let r = meas_var.ok_or_else(|| Error::config("double well needs a meas_var"))?;
            let (model, meas) = make_double_well(config.sigma, r)?;
            let prior = GaussianState::new(DVector::zeros(1), DMatrix::identity(1, 1));
            Ok(ModelInstance {
                model,
                meas,
                truth_prior: prior.clone(),
                est_prior: prior,
                blocks: Vec::new(),
            })
        }
        "ou" => {
            let r = meas_var.ok_or_else(|| Error::config("ou needs a meas_var"))?;
            let (model, meas) = make_ou(config.ou_a, config.ou_q, r)?;
            let prior = GaussianState::new(DVector::zeros(1), DMatrix::identity(1, 1));
            Ok(ModelInstance {
                model,
                meas,
                truth_prior: prior.clone(),
                est_prior: prior,
                blocks: Vec::new(),
            })
        }
        "reentry" => {
            let (model, meas) = make_reentry();
            Ok(ModelInstance {
                model,
                meas,
                truth_prior: reentry_truth_prior(),
                est_prior: reentry_estimation_prior(),
                blocks: reentry_blocks(),
            })
        }
        other => Err(Error::config(format!("unknown model '{other}'"))),
    }
}

/// Filtering scheme for an engine name (the `*2` engines use the averaged
/// Jacobian form of the sigma-point cross term).
pub fn scheme_for_engine(name: &str, dim: usize, params: &EngineParams) -> Result<FilterScheme> {
    Ok(match name {
        "analytic" => FilterScheme::Analytic,
        "ext" => FilterScheme::Ext,
        "ct" => FilterScheme::SigmaPoint(cubature_rule(dim)),
        "ct2" => FilterScheme::SigmaPointJacobian(cubature_rule(dim)),
        "ut" => FilterScheme::SigmaPoint(unscented_rule(
            dim,
            params.ut_alpha,
            params.ut_beta,
            params.ut_kappa,
        )?),
        "ut2" => FilterScheme::SigmaPointJacobian(unscented_rule(
            dim,
            params.ut_alpha,
            params.ut_beta,
            params.ut_kappa,
        )?),
        "gh" => FilterScheme::SigmaPoint(gauss_hermite_rule(dim, params.gh_order)?),
        "gh2" => FilterScheme::SigmaPointJacobian(gauss_hermite_rule(dim, params.gh_order)?),
        other => return Err(Error::config(format!("unknown engine '{other}'"))),
    })
}

fn derive_seed(base: u64, var_idx: usize, run: usize, stream: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((var_idx as u64) << 32)
        .wrapping_add((run as u64) << 2)
        .wrapping_add(stream)
}

fn draw_initial(prior: &GaussianState, seed: u64) -> Result<DVector<f64>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let chol = cov_factor(&prior.cov)?;
    let n = prior.mean.len();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
    Ok(&prior.mean + &chol.l * z)
}

/// Simulated dataset of one Monte-Carlo run.
pub struct RunData {
    pub truth: SamplePath,
    pub records: Vec<MeasurementRecord>,
}

pub fn simulate_run(
    config: &ExperimentConfig,
    instance: &ModelInstance,
    var_idx: usize,
    run: usize,
) -> Result<RunData> {
    let sim_grid = config.sim_grid()?;
    let x0 = draw_initial(&instance.truth_prior, derive_seed(config.seed, var_idx, run, 0))?;
    let truth = euler_maruyama(
        &instance.model,
        &x0,
        &sim_grid,
        derive_seed(config.seed, var_idx, run, 1),
    )?;
    let records = sample_measurements(
        &truth,
        &instance.meas,
        &config.measurement_times(),
        derive_seed(config.seed, var_idx, run, 2),
    )?;
    Ok(RunData { truth, records })
}

/// One metric table row: a (run, method, engine) cell, or a quarantined
/// failure with the error message.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub run_id: usize,
    pub method: String,
    pub engine: String,
    pub meas_var: Option<f64>,
    pub metrics: Option<RunMetrics>,
    pub vgs_iterations: Option<usize>,
    pub vgs_converged: Option<bool>,
    pub kl_decreasing: Option<bool>,
    pub error: Option<String>,
}

impl MetricRow {
    fn failure(run_id: usize, method: &str, engine: &str, meas_var: Option<f64>, err: &Error) -> Self {
        MetricRow {
            run_id,
            method: method.to_string(),
            engine: engine.to_string(),
            meas_var,
            metrics: None,
            vgs_iterations: None,
            vgs_converged: None,
            kl_decreasing: None,
            error: Some(err.to_string().replace([',', '\n'], ";")),
        }
    }
}

/// GFGS + VGS estimates of one run under one engine.
pub struct EngineOutput {
    pub filter: FilterTrajectory,
    pub smoother: SmootherTrajectory,
    pub vgs: Option<VgsResult>,
}

/// Run the full estimation pipeline for one engine on one dataset.
pub fn run_pipeline(
    config: &ExperimentConfig,
    instance: &ModelInstance,
    data: &RunData,
    engine_name: &str,
    with_vgs: bool,
) -> Result<EngineOutput> {
    let grid = config.est_grid()?;
    let params = config.engine_params();
    let scheme = scheme_for_engine(engine_name, instance.model.state_dim, &params)?;
    let ft = run_filter(
        &instance.model,
        &instance.meas,
        &data.records,
        &grid,
        &instance.est_prior,
        &scheme,
    )?;
    let st = smooth_type2(&instance.model, &scheme, &ft)?;
    let vgs = if with_vgs {
        let engine = build_engine(engine_name, &instance.model, Some(&instance.meas), &params)?;
        let init = export_variational(&instance.model, &ft, &st)?;
        Some(run_vgs(
            &instance.model,
            &instance.meas,
            &data.records,
            &grid,
            &instance.est_prior,
            &engine,
            init,
            &config.vgs_config(),
        )?)
    } else {
        None
    };
    Ok(EngineOutput {
        filter: ft,
        smoother: st,
        vgs,
    })
}

fn rows_for_run(
    config: &ExperimentConfig,
    var_idx: usize,
    meas_var: Option<f64>,
    run: usize,
) -> Vec<MetricRow> {
    let want_gfgs = config.methods.iter().any(|m| m == "gfgs");
    let want_vgs = config.methods.iter().any(|m| m == "vgs");
    let mut rows = Vec::new();

    let instance = match build_model(config, meas_var) {
        Ok(i) => i,
        Err(e) => {
            for engine in &config.engines {
                rows.push(MetricRow::failure(run, "setup", engine, meas_var, &e));
            }
            return rows;
        }
    };
    let data = match simulate_run(config, &instance, var_idx, run) {
        Ok(d) => d,
        Err(e) => {
            for engine in &config.engines {
                rows.push(MetricRow::failure(run, "simulate", engine, meas_var, &e));
            }
            return rows;
        }
    };

    for engine in &config.engines {
        match run_pipeline(config, &instance, &data, engine, want_vgs) {
            Ok(out) => {
                if want_gfgs {
                    match run_metrics(
                        &data.truth,
                        &out.smoother.mean,
                        &out.smoother.cov,
                        &instance.blocks,
                    ) {
                        Ok(m) => rows.push(MetricRow {
                            run_id: run,
                            method: "gfgs".to_string(),
                            engine: engine.clone(),
                            meas_var,
                            metrics: Some(m),
                            vgs_iterations: None,
                            vgs_converged: None,
                            kl_decreasing: None,
                            error: None,
                        }),
                        Err(e) => rows.push(MetricRow::failure(run, "gfgs", engine, meas_var, &e)),
                    }
                }
                if let Some(v) = out.vgs {
                    let decreasing = v.kl_history.windows(2).all(|w| w[1] < w[0]);
                    match run_metrics(&data.truth, &v.mean, &v.cov, &instance.blocks) {
                        Ok(m) => rows.push(MetricRow {
                            run_id: run,
                            method: "vgs".to_string(),
                            engine: engine.clone(),
                            meas_var,
                            metrics: Some(m),
                            vgs_iterations: Some(v.iterations),
                            vgs_converged: Some(v.converged),
                            kl_decreasing: Some(decreasing),
                            error: None,
                        }),
                        Err(e) => rows.push(MetricRow::failure(run, "vgs", engine, meas_var, &e)),
                    }
                }
            }
            Err(e) => {
                if want_gfgs {
                    rows.push(MetricRow::failure(run, "gfgs", engine, meas_var, &e));
                }
                if want_vgs {
                    rows.push(MetricRow::failure(run, "vgs", engine, meas_var, &e));
                }
            }
        }
    }
    rows
}

/// Monte-Carlo benchmark: runs execute in a worker pool and are merged by
/// (variance, run) index, never by completion order.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    config.validate()?;
    let sweep = config.variance_sweep();
    let jobs: Vec<(usize, Option<f64>, usize)> = sweep
        .iter()
        .enumerate()
        .flat_map(|(vi, &var)| (0..config.runs).map(move |r| (vi, var, r)))
        .collect();
    let mut results: Vec<(usize, usize, Vec<MetricRow>)> = jobs
        .par_iter()
        .map(|&(vi, var, run)| (vi, run, rows_for_run(config, vi, var, run)))
        .collect();
    results.sort_by_key(|&(vi, run, _)| (vi, run));
    Ok(results.into_iter().flat_map(|(_, _, rows)| rows).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub const METRICS_HEADER: &str = "run_id,method,engine,meas_var,failed,rmse,nll,consistency,\
rmse_position,nll_position,consistency_position,\
rmse_velocity,nll_velocity,consistency_velocity,\
rmse_parameter,nll_parameter,consistency_parameter,\
vgs_iterations,vgs_converged,kl_decreasing,error";

/// Per-run metric table (block columns are empty for 1-D models).
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let (rmse, nll, cons) = r
            .metrics
            .as_ref()
            .map_or((String::new(), String::new(), String::new()), |m| {
                (format!("{}", m.rmse), format!("{}", m.nll), format!("{}", m.consistency95))
            });
        let mut block_cols = vec![String::new(); 9];
        if let Some(m) = &r.metrics {
            for (i, b) in m.blocks.iter().take(3).enumerate() {
                block_cols[3 * i] = format!("{}", b.rmse);
                block_cols[3 * i + 1] = format!("{}", b.nll);
                block_cols[3 * i + 2] = format!("{}", b.consistency95);
            }
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.method,
            r.engine,
            fmt_opt(r.meas_var),
            r.error.is_some(),
            rmse,
            nll,
            cons,
            block_cols.join(","),
            r.vgs_iterations.map_or(String::new(), |v| v.to_string()),
            r.vgs_converged.map_or(String::new(), |v| v.to_string()),
            format!(
                "{},{}",
                r.kl_decreasing.map_or(String::new(), |v| v.to_string()),
                r.error.clone().unwrap_or_default()
            ),
        );
    }
    out
}

fn group_values<'a>(
    rows: &'a [MetricRow],
    pick: &dyn Fn(&RunMetrics) -> f64,
) -> Vec<((String, String, Option<f64>), Vec<f64>)> {
    let mut groups: Vec<((String, String, Option<f64>), Vec<f64>)> = Vec::new();
    for r in rows {
        let Some(m) = &r.metrics else { continue };
        let key = (r.method.clone(), r.engine.clone(), r.meas_var);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => vals.push(pick(m)),
            None => groups.push((key, vec![pick(m)])),
        }
    }
    groups
}

const METRIC_PICKS: [(&str, fn(&RunMetrics) -> f64); 3] = [
    ("rmse", |m| m.rmse),
    ("nll", |m| m.nll),
    ("consistency", |m| m.consistency95),
];

/// Aggregate table: mean and quantiles per (method, engine, variance, metric),
/// plus failure counts.
pub fn aggregate_csv(rows: &[MetricRow]) -> String {
    let mut out =
        String::from("method,engine,meas_var,metric,n,failures,mean,q05,q25,q50,q75,q95\n");
    for (name, pick) in METRIC_PICKS {
        for ((method, engine, var), values) in group_values(rows, &pick) {
            let failures = rows
                .iter()
                .filter(|r| {
                    r.method == method && r.engine == engine && r.meas_var == var && r.error.is_some()
                })
                .count();
            if let Ok(s) = aggregate(&values) {
                let _ = writeln!(
                    out,
                    "{method},{engine},{},{name},{},{failures},{},{},{},{},{},{}",
                    fmt_opt(var),
                    values.len(),
                    s.mean,
                    s.q05,
                    s.q25,
                    s.q50,
                    s.q75,
                    s.q95
                );
            }
        }
    }
    out
}

/// Parse a metric table written by [`metrics_csv`] (for the `plotdata`
/// command, which post-processes an existing benchmark output).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::config("empty metrics file"))?;
    if header != METRICS_HEADER {
        return Err(Error::config("unrecognized metrics file header"));
    }
    let parse_f = |s: &str, line: usize| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::config(format!("bad number '{s}' on line {line}")))
    };
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 21 {
            return Err(Error::config(format!("short row on line {}", lineno + 2)));
        }
        let failed = f[4] == "true";
        let metrics = if failed || f[5].is_empty() {
            None
        } else {
            let mut blocks = Vec::new();
            for (bi, name) in ["position", "velocity", "parameter"].iter().enumerate() {
                if !f[8 + 3 * bi].is_empty() {
                    blocks.push(crate::metrics::BlockMetrics {
                        name: name.to_string(),
                        rmse: parse_f(f[8 + 3 * bi], lineno + 2)?,
                        nll: parse_f(f[9 + 3 * bi], lineno + 2)?,
                        consistency95: parse_f(f[10 + 3 * bi], lineno + 2)?,
                    });
                }
            }
            Some(RunMetrics {
                rmse: parse_f(f[5], lineno + 2)?,
                nll: parse_f(f[6], lineno + 2)?,
                consistency95: parse_f(f[7], lineno + 2)?,
                blocks,
            })
        };
        rows.push(MetricRow {
            run_id: f[0]
                .parse()
                .map_err(|_| Error::config(format!("bad run id on line {}", lineno + 2)))?,
            method: f[1].to_string(),
            engine: f[2].to_string(),
            meas_var: if f[3].is_empty() {
                None
            } else {
                Some(parse_f(f[3], lineno + 2)?)
            },
            metrics,
            vgs_iterations: f[17].parse().ok(),
            vgs_converged: f[18].parse().ok(),
            kl_decreasing: f[19].parse().ok(),
            error: if f[20].is_empty() {
                None
            } else {
                Some(f[20..].join(","))
            },
        });
    }
    Ok(rows)
}

/// Long-format quantile rows for boxplots: one row per
/// (method, engine, variance, metric, quantile).
pub fn plotdata_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("method,engine,meas_var,metric,quantile,value\n");
    for (name, pick) in METRIC_PICKS {
        for ((method, engine, var), mut values) in group_values(rows, &pick) {
            values.sort_by(|a, b| a.total_cmp(b));
            for q in [0.05, 0.25, 0.50, 0.75, 0.95] {
                let _ = writeln!(
                    out,
                    "{method},{engine},{},{name},{q},{}",
                    fmt_opt(var),
                    quantile(&values, q)
                );
            }
        }
    }
    out
}

/// (t, mean components, covariance diagonal) table of a state trajectory.
pub fn trajectory_csv(
    grid: &TimeGrid,
    mean: &crate::odeint::GridFunction<DVector<f64>>,
    cov: &crate::odeint::GridFunction<DMatrix<f64>>,
) -> String {
    let n = mean.post(0).len();
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",m{}", i + 1);
    }
    for i in 0..n {
        let _ = write!(out, ",p{}{}", i + 1, i + 1);
    }
    out.push('\n');
    for i in 0..grid.len() {
        let _ = write!(out, "{}", grid.time(i));
        for c in 0..n {
            let _ = write!(out, ",{}", mean.post(i)[c]);
        }
        for c in 0..n {
            let _ = write!(out, ",{}", cov.post(i)[(c, c)]);
        }
        out.push('\n');
    }
    out
}

/// (t, state components) table of a simulated path.
pub fn truth_csv(truth: &SamplePath) -> String {
    let n = truth.states[0].len();
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",x{}", i + 1);
    }
    out.push('\n');
    for i in 0..truth.grid.len() {
        let _ = write!(out, "{}", truth.grid.time(i));
        for c in 0..n {
            let _ = write!(out, ",{}", truth.states[i][c]);
        }
        out.push('\n');
    }
    out
}

/// (t, measurement components) table.
pub fn measurements_csv(records: &[MeasurementRecord]) -> String {
    let d = records.first().map_or(0, |r| r.value.len());
    let mut out = String::from("t");
    for i in 0..d {
        let _ = write!(out, ",y{}", i + 1);
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}", r.time);
        for c in 0..d {
            let _ = write!(out, ",{}", r.value[c]);
        }
        out.push('\n');
    }
    out
}

/// Grid-reference smoothing moments as (t, mean, var).
pub fn reference_csv(posterior: &GridPosterior) -> String {
    let mut out = String::from("t,mean,var\n");
    for i in 0..posterior.times.len() {
        let (mean, var) = crate::grid_reference::moments(&posterior.smoothing[i], &posterior.grid);
        let _ = writeln!(out, "{},{mean},{var}", posterior.times.time(i));
    }
    out
}

/// Grid-reference smoother for 1-D configs on the estimation grid.
pub fn run_reference_for(
    config: &ExperimentConfig,
    instance: &ModelInstance,
    data: &RunData,
) -> Result<GridPosterior> {
    if instance.model.state_dim != 1 {
        return Err(Error::config(
            "the grid reference supports only 1-D state models",
        ));
    }
    let grid = StateGrid::new(config.ref_x_min, config.ref_x_max, config.ref_n_cells)?;
    run_reference(
        &instance.model,
        &instance.meas,
        &data.records,
        &config.est_grid()?,
        instance.est_prior.mean[0],
        instance.est_prior.cov[(0, 0)],
        &grid,
    )
}
