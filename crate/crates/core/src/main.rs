use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chainsgd::config::ExperimentConfig;
use chainsgd::experiments::{
    bound_report, counterexample_gd_bias, counterexample_sigmoid_bias, counterexample_top1, sweep,
    Top1Params,
};
use chainsgd::operator::gradcheck_catalog;
use chainsgd::optimizer::{run, stability_metrics};
use chainsgd::output::{self, write_csv_file};
use chainsgd::Result;

#[derive(Parser)]
#[command(
    name = "chainsgd",
    version,
    about = "Perturbed-pass SGD experiments on operator chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct WithConfig {
    /// TOML configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// One run of `[run]` under `[plan]`; writes trace.csv.
    Run(WithConfig),
    /// The `[grid]` sweep; writes sweep.csv and sweep_aggregate.csv.
    Sweep(WithConfig),
    /// Bound report; exits with status 2 on any dominance violation.
    Bounds(WithConfig),
    /// Small constructed examples; each writes one CSV.
    #[command(subcommand)]
    Counterexample(Counterexample),
    /// Finite-difference checks of the operator catalog; writes gradcheck.csv.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Writes the `[dataset]` samples to data.csv.
    GenData(WithConfig),
}

#[derive(Subcommand)]
enum Counterexample {
    /// Constant forward shift on `ℓ(x) = x²`.
    GdBias {
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 200)]
        horizon: u64,
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Top-1 compression of the intermediate adjoint.
    Top1 {
        /// Use the momentum setting instead of plain GD.
        #[arg(long)]
        momentum: bool,
        /// Matrix entries `a,b,c,d` (row-major).
        #[arg(long, value_delimiter = ',', num_args = 4)]
        a: Option<Vec<f64>>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        horizon: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Two-point forward perturbation through a sigmoid.
    Sigmoid {
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn load(c: &WithConfig) -> Result<ExperimentConfig> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match c.common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out)?;
    Ok(&c.out)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let problem = cfg.problem()?;
            let trace = run(&problem.chain, &problem.samples, &cfg.plan()?, &cfg.run)?;
            let path = out_dir(&c.common)?.join("trace.csv");
            write_csv_file(&path, output::SCHEMA_TRACE, &output::trace_rows(&trace))?;
            let m = stability_metrics(&trace);
            println!(
                "stable_gradient_norm={} stable_iteration={} q_delta={} q_eps={} diverged={}",
                m.stable_gradient_norm,
                m.stable_iteration
                    .map_or("not_reached".into(), |t| t.to_string()),
                trace.q_delta,
                trace.q_eps,
                trace.diverged
            );
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let problem = cfg.problem()?;
            let result = sweep(&cfg.grid, &problem)?;
            let dir = out_dir(&c.common)?;
            write_csv_file(
                &dir.join("sweep.csv"),
                output::SCHEMA_SWEEP,
                &result.records,
            )?;
            write_csv_file(
                &dir.join("sweep_aggregate.csv"),
                output::SCHEMA_AGGREGATE,
                &result.aggregates,
            )?;
            for label in result.cell_labels() {
                if let Some(v) = result.plateau_verdict(label) {
                    println!("{label}: ratio={:.4} trend={:?}", v.ratio, v.trend);
                }
            }
        }
        Command::Bounds(c) => {
            let cfg = load(&c)?;
            let problem = cfg.problem()?;
            let report = bound_report(&problem, &cfg.plan()?, &cfg.run, &cfg.bounds)?;
            write_csv_file(
                &out_dir(&c.common)?.join("bounds.csv"),
                output::SCHEMA_BOUNDS,
                &report.rows,
            )?;
            println!(
                "rows={} violations={}",
                report.rows.len(),
                report.violations
            );
            if report.violations > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Counterexample(Counterexample::GdBias {
            delta,
            gamma,
            horizon,
            x0,
            common,
        }) => {
            let r = counterexample_gd_bias(delta, gamma, horizon, x0)?;
            write_csv_file(
                &out_dir(&common)?.join("gd_bias.csv"),
                output::SCHEMA_GD_BIAS,
                &output::gd_bias_rows(&r),
            )?;
            println!(
                "final={} fixed_point={} gap={:e} contraction={} contracting={}",
                r.final_iterate, r.fixed_point, r.gap, r.contraction_factor, r.contracting
            );
        }
        Command::Counterexample(Counterexample::Top1 {
            momentum,
            a,
            s,
            gamma,
            beta,
            horizon,
            common,
        }) => {
            let base = if momentum {
                Top1Params::momentum()
            } else {
                Top1Params::plain()
            };
            let p = Top1Params {
                a: a.map_or(base.a, |v| [[v[0], v[1]], [v[2], v[3]]]),
                s: s.unwrap_or(base.s),
                gamma: gamma.unwrap_or(base.gamma),
                beta: beta.unwrap_or(base.beta),
                horizon: horizon.unwrap_or(base.horizon),
                threshold: base.threshold,
            };
            let r = counterexample_top1(&p)?;
            write_csv_file(
                &out_dir(&common)?.join("top1.csv"),
                output::SCHEMA_TOP1,
                &output::top1_rows(&r),
            )?;
            let v = &r.verdict;
            println!(
                "clean_final_norm={:e} compressed_min_norm={:e} clean_converged={} compressed_stalls={}",
                v.clean_final_norm, v.compressed_min_norm, v.clean_converged, v.compressed_stalls
            );
        }
        Command::Counterexample(Counterexample::Sigmoid { a, draws, common }) => {
            let r = counterexample_sigmoid_bias(a, draws, common.seed.unwrap_or(0))?;
            write_csv_file(
                &out_dir(&common)?.join("sigmoid.csv"),
                output::SCHEMA_SIGMOID,
                &[r],
            )?;
            println!(
                "bias={} mc_bias={} se={:e} agrees={}",
                r.bias, r.mc_bias, r.mc_std_error, r.mc_agrees
            );
        }
        Command::Gradcheck {
            points,
            tolerance,
            common,
        } => {
            let rows = gradcheck_catalog(points, common.seed.unwrap_or(0));
            write_csv_file(
                &out_dir(&common)?.join("gradcheck.csv"),
                output::SCHEMA_GRADCHECK,
                &rows,
            )?;
            let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
            println!("checks={} max_error={worst:e}", rows.len());
            if worst >= tolerance {
                return Ok(ExitCode::from(2));
            }
        }
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let problem = cfg.problem()?;
            std::fs::write(
                out_dir(&c.common)?.join("data.csv"),
                output::data_csv_string(&problem.samples)?,
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
