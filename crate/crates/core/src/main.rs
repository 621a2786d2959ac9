//! Command-line harness for the continuous-discrete Gaussian smoothers:
//! simulation, filtering, smoothing, the variational smoother, the 1-D grid
//! reference, and seeded Monte-Carlo benchmarks with CSV output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdgs::bench::{
    aggregate_csv, build_model, measurements_csv, metrics_csv, parse_metrics_csv, plotdata_csv,
    reference_csv, run_benchmark, run_pipeline, run_reference_for, simulate_run, trajectory_csv,
    truth_csv, ExperimentConfig,
};
use cdgs::{Error, Result};

#[derive(Parser)]
#[command(name = "cdgs", about = "Continuous-discrete Gaussian smoothing benchmarks")]
struct Cli {
    /// TOML experiment configuration; defaults to the named preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset when no config file is given: double_well, reentry, ou.
    #[arg(long, global = true, default_value = "double_well")]
    preset: String,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the Monte-Carlo run count.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Restrict to a single engine (analytic, ext, ct, ut, gh, ct2, ut2, gh2).
    #[arg(long, global = true)]
    engine: Option<String>,
    /// Worker threads for Monte-Carlo runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate truth trajectories and noisy measurements.
    Simulate,
    /// Run the continuous-discrete Gaussian filter on one simulated run.
    Filter,
    /// Run the filter and the Type II smoother on one simulated run.
    Smooth,
    /// Run the full pipeline including the variational smoother on one run.
    Vgs,
    /// Finite-difference reference smoother (1-D models only).
    Reference,
    /// Full Monte-Carlo benchmark with metric and aggregate tables.
    Benchmark,
    /// Recompute boxplot quantile data from an existing metrics.csv.
    Plotdata,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&cli.preset)?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(runs) = cli.runs {
        config.runs = runs;
    }
    if let Some(engine) = &cli.engine {
        config.engines = vec![engine.clone()];
    }
    config.validate()?;
    Ok(config)
}

fn write(out_dir: &PathBuf, name: &str, content: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, content)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let config = load_config(cli)?;
    write(&cli.out, "config.toml", &config.to_toml())?;

    // single-run commands use the first variance and the first engine
    let first_var = *config
        .variance_sweep()
        .first()
        .ok_or_else(|| Error::config("empty variance sweep"))?;
    let engine = config.engines[0].clone();

    match cli.command {
        Command::Simulate => {
            for (vi, var) in config.variance_sweep().into_iter().enumerate() {
                let instance = build_model(&config, var)?;
                for run in 0..config.runs {
                    let data = simulate_run(&config, &instance, vi, run)?;
                    write(
                        &cli.out,
                        &format!("run{run:03}_var{vi}_truth.csv"),
                        &truth_csv(&data.truth),
                    )?;
                    write(
                        &cli.out,
                        &format!("run{run:03}_var{vi}_measurements.csv"),
                        &measurements_csv(&data.records),
                    )?;
                }
            }
        }
        Command::Filter => {
            let instance = build_model(&config, first_var)?;
            let data = simulate_run(&config, &instance, 0, 0)?;
            let out = run_pipeline(&config, &instance, &data, &engine, false)?;
            write(
                &cli.out,
                "filter.csv",
                &trajectory_csv(&config.est_grid()?, &out.filter.mean, &out.filter.cov),
            )?;
        }
        Command::Smooth => {
            let instance = build_model(&config, first_var)?;
            let data = simulate_run(&config, &instance, 0, 0)?;
            let out = run_pipeline(&config, &instance, &data, &engine, false)?;
            write(
                &cli.out,
                "smooth.csv",
                &trajectory_csv(&config.est_grid()?, &out.smoother.mean, &out.smoother.cov),
            )?;
        }
        Command::Vgs => {
            let instance = build_model(&config, first_var)?;
            let data = simulate_run(&config, &instance, 0, 0)?;
            let out = run_pipeline(&config, &instance, &data, &engine, true)?;
            let vgs = out.vgs.expect("vgs requested");
            write(
                &cli.out,
                "vgs.csv",
                &trajectory_csv(&config.est_grid()?, &vgs.mean, &vgs.cov),
            )?;
            let mut kl = String::from("iteration,kl\n");
            for (i, v) in vgs.kl_history.iter().enumerate() {
                kl.push_str(&format!("{i},{v}\n"));
            }
            write(&cli.out, "kl_history.csv", &kl)?;
            println!(
                "vgs: {} iterations, converged = {}",
                vgs.iterations, vgs.converged
            );
        }
        Command::Reference => {
            let instance = build_model(&config, first_var)?;
            let data = simulate_run(&config, &instance, 0, 0)?;
            let post = run_reference_for(&config, &instance, &data)?;
            write(&cli.out, "reference.csv", &reference_csv(&post))?;
        }
        Command::Benchmark => {
            let rows = run_benchmark(&config)?;
            let failures = rows.iter().filter(|r| r.error.is_some()).count();
            write(&cli.out, "metrics.csv", &metrics_csv(&rows))?;
            write(&cli.out, "aggregate.csv", &aggregate_csv(&rows))?;
            println!("{} rows, {failures} failed", rows.len());
        }
        Command::Plotdata => {
            let path = cli.out.join("metrics.csv");
            let text = std::fs::read_to_string(&path)?;
            let rows = parse_metrics_csv(&text)?;
            write(&cli.out, "plotdata.csv", &plotdata_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
