//! Acceptance criteria, one `PASS`/`FAIL` line each. Runs without the libtest
//! harness so the lines are never captured; exits nonzero on any failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chainsgd::bounds::{admissibility, occurrence_limits, Assumption};
use chainsgd::config::ExperimentConfig;
use chainsgd::experiments::{
    bound_report, counterexample_gd_bias, counterexample_sigmoid_bias, counterexample_top1,
    rate_bound_check, sweep, BoundReportOptions, RowKind, SweepGrid, SweepResult, Top1Params,
    BASELINE_LABEL,
};
use chainsgd::operator::{catalog, gradcheck_catalog};
use chainsgd::output::{self, csv_string};
use chainsgd::perturbation::PerturbationPlan;
use chainsgd::tensor::Tensor3;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// CSV artefacts of a criterion, compared byte for byte on the rerun.
#[derive(Default)]
struct Artefacts(Vec<(String, String)>);

impl Artefacts {
    fn push(&mut self, name: &str, text: String) {
        self.0.push((name.to_string(), text));
    }
}

fn gd_bias(art: &mut Artefacts) -> Outcome {
    let start = Instant::now();
    let r = counterexample_gd_bias(0.5, 0.1, 200, 1.0).map_err(err)?;
    let elapsed = start.elapsed();
    art.push(
        "gd_bias",
        csv_string(output::SCHEMA_GD_BIAS, &output::gd_bias_rows(&r)).map_err(err)?,
    );
    let dist = (r.final_iterate + 0.5).abs();
    let ok = dist < 1e-9 && elapsed < Duration::from_millis(1);
    Ok((
        ok,
        format!("|x_T + 0.5| = {dist:.3e} (< 1e-9), {elapsed:?} (< 1 ms)"),
    ))
}

fn top1(art: &mut Artefacts) -> Outcome {
    let start = Instant::now();
    let plain = counterexample_top1(&Top1Params::plain()).map_err(err)?;
    let mom = counterexample_top1(&Top1Params::momentum()).map_err(err)?;
    let elapsed = start.elapsed();
    art.push(
        "top1_plain",
        csv_string(output::SCHEMA_TOP1, &output::top1_rows(&plain)).map_err(err)?,
    );
    art.push(
        "top1_momentum",
        csv_string(output::SCHEMA_TOP1, &output::top1_rows(&mom)).map_err(err)?,
    );

    let w2 = plain.clean.weights.get(2).map(|w| (w[0], w[1]));
    let clean_exact = w2 == Some((0.0, 0.0));
    // Through t = 1000, or up to divergence, which keeps the norm above 0.1.
    let covered = plain.compressed_norms.len() > 1000 || plain.compressed.diverged;
    let plain_stalls = covered && plain.compressed_norms.iter().all(|n| *n > 0.1);
    let mom_clean = mom.verdict.clean_final_norm;
    let mom_min = mom
        .compressed_norms
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let ok = clean_exact
        && plain_stalls
        && mom_clean < 1e-3
        && mom_min >= 1e-3
        && elapsed < Duration::from_secs(1);
    Ok((
        ok,
        format!(
            "clean w1(2) = {w2:?}, compressed min norm {:.4} (> 0.1); momentum clean final {mom_clean:.2e} (< 1e-3), \
             compressed min {mom_min:.4} (>= 1e-3); {elapsed:?} (< 1 s)",
            plain.verdict.compressed_min_norm
        ),
    ))
}

fn sigmoid_bias(art: &mut Artefacts) -> Outcome {
    let r = counterexample_sigmoid_bias(1.0, 1_000_000, 0).map_err(err)?;
    art.push(
        "sigmoid",
        csv_string(output::SCHEMA_SIGMOID, &[r]).map_err(err)?,
    );
    let s = sigmoid(1.0);
    let closed = 0.25 - s * (1.0 - s);
    let exact_ok = (r.bias - closed).abs() < 1e-6 && (r.bias - 0.053388).abs() < 1e-6;
    let mc_gap = (r.mc_bias - r.bias).abs();
    let mc_ok = mc_gap <= 3.0 * r.mc_std_error;
    Ok((
        exact_ok && mc_ok,
        format!(
            "bias {:.7} vs closed form {closed:.7}; MC gap {mc_gap:.2e} <= 3 SE = {:.2e} over {} draws",
            r.bias,
            3.0 * r.mc_std_error,
            r.draws
        ),
    ))
}

fn jacobians(art: &mut Artefacts) -> Outcome {
    let rows = gradcheck_catalog(100, 0);
    art.push(
        "gradcheck",
        csv_string(output::SCHEMA_GRADCHECK, &rows).map_err(err)?,
    );
    let ops = catalog();
    let per_op_ok = ops
        .iter()
        .all(|op| rows.iter().filter(|r| r.operator == op.name()).count() == 100);
    let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
    Ok((
        per_op_ok && worst < 1e-6,
        format!(
            "{} operators x 100 points, max relative error {worst:.2e} (< 1e-6)",
            ops.len()
        ),
    ))
}

fn dominance(art: &mut Artefacts) -> Outcome {
    let cfg = load("bounds.toml");
    let problem = cfg.problem().map_err(err)?;
    let opts = BoundReportOptions {
        check_rate: false,
        ..cfg.bounds.clone()
    };
    let start = Instant::now();
    let report = bound_report(&problem, &cfg.plan().map_err(err)?, &cfg.run, &opts).map_err(err)?;
    let elapsed = start.elapsed();
    art.push(
        "dominance",
        csv_string(output::SCHEMA_BOUNDS, &report.rows).map_err(err)?,
    );
    let rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.kind == RowKind::Dominance)
        .collect();
    let peak = |prefix: &str| {
        let sel: Vec<_> = rows
            .iter()
            .filter(|r| r.quantity.starts_with(prefix))
            .collect();
        (
            sel.len(),
            sel.iter().map(|r| r.empirical).fold(0.0, f64::max),
            sel.first().map_or(f64::NAN, |r| r.theoretical),
        )
    };
    let (nv, var_max, var_bound) = peak("variance@");
    let (nb, bias_max, bias_bound) = peak("bias@");
    let ok = nv == 10
        && nb == 10
        && report.violations == 0
        && opts.dominance.trials == 1000
        && elapsed < Duration::from_secs(30);
    Ok((
        ok,
        format!(
            "{} violations; variance {var_max:.3e} <= {var_bound:.3e}, bias {bias_max:.3e} <= {bias_bound:.3e} \
             at {nv} points x {} trials; {elapsed:.1?} (< 30 s)",
            report.violations, opts.dominance.trials
        ),
    ))
}

fn rate_bounds(art: &mut Artefacts) -> Outcome {
    let cfg = load("bounds.toml");
    let problem = cfg.problem().map_err(err)?;
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, plan) in [
        ("clean", PerturbationPlan::clean()),
        ("perturbed", cfg.plan().map_err(err)?),
    ] {
        let r = rate_bound_check(&problem, &plan, &cfg.run, &cfg.bounds.rate).map_err(err)?;
        art.push(
            name,
            csv_string(output::SCHEMA_TRACE, &output::trace_rows(&r.trace)).map_err(err)?,
        );
        let pl = r.pl_bound.unwrap_or(f64::NAN);
        ok &= r.loss_star_certified
            && r.empirical_mean_grad_sq <= r.nonconvex_bound
            && r.empirical_gap <= pl;
        parts.push(format!(
            "{name}: mean |grad|^2 {:.3e} <= {:.3e}, gap {:.3e} <= {pl:.3e}",
            r.empirical_mean_grad_sq, r.nonconvex_bound, r.empirical_gap
        ));
    }
    let elapsed = start.elapsed();
    ok &= cfg.run.horizon == 20000 && elapsed < Duration::from_secs(120);
    Ok((ok, format!("{}; {elapsed:.1?} (< 2 min)", parts.join("; "))))
}

fn sweep_artefacts(art: &mut Artefacts, name: &str, r: &SweepResult) -> Result<(), String> {
    art.push(
        &format!("{name}_records"),
        csv_string(output::SCHEMA_SWEEP, &r.records).map_err(err)?,
    );
    art.push(
        &format!("{name}_aggregates"),
        csv_string(output::SCHEMA_AGGREGATE, &r.aggregates).map_err(err)?,
    );
    Ok(())
}

fn stable(r: &SweepResult, cell: &str, gamma: f64) -> Result<f64, String> {
    r.aggregate(cell, gamma)
        .map(|a| a.mean_stable_gradient_norm)
        .ok_or_else(|| format!("missing cell {cell} at {gamma}"))
}

fn zero_mean_asymmetry(art: &mut Artefacts) -> Outcome {
    let cfg = load("frequent_zero_mean.toml");
    let problem = cfg.problem().map_err(err)?;
    let (hi, lo) = (1e-2, 1e-4);
    let start = Instant::now();
    let mut ratios = Vec::new();
    for (name, sf, sb) in [("backward", 0.0, 2.0), ("forward", 2.0, 0.0)] {
        let grid = SweepGrid {
            step_sizes: vec![hi, lo],
            sigma_f: vec![sf],
            sigma_b: vec![sb],
            include_baseline: false,
            ..cfg.grid.clone()
        };
        let r = sweep(&grid, &problem).map_err(err)?;
        sweep_artefacts(art, name, &r)?;
        let cell = format!("sf={sf},sb={sb}");
        ratios.push(stable(&r, &cell, lo)? / stable(&r, &cell, hi)?);
    }
    let elapsed = start.elapsed();
    let a = ratios[0] < 0.5;
    let b = ratios[1] > 0.5;
    let shape = problem.chain.input_dim() == 10 && problem.samples.len() == 500;
    let setup = shape && cfg.grid.base.horizon == 20000 && cfg.grid.repetitions == 3;
    Ok((
        a && b && setup && elapsed < Duration::from_secs(900),
        format!(
            "(a) backward sb=2 ratio {:.3} (< 0.5) {}; (b) forward sf=2 ratio {:.3} (> 0.5) {}; {elapsed:.1?} (< 15 min)",
            ratios[0],
            if a { "ok" } else { "fails" },
            ratios[1],
            if b { "ok" } else { "fails" }
        ),
    ))
}

fn sci(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn smallest_step(grid: &SweepGrid) -> f64 {
    grid.step_sizes
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn biased_backward(art: &mut Artefacts) -> Outcome {
    let cfg = load("frequent_biased_backward.toml");
    let problem = cfg.problem().map_err(err)?;
    let gamma = smallest_step(&cfg.grid);
    let grid = SweepGrid {
        step_sizes: vec![gamma],
        include_baseline: true,
        ..cfg.grid.clone()
    };
    let r = sweep(&grid, &problem).map_err(err)?;
    sweep_artefacts(art, "biased", &r)?;
    let base = stable(&r, BASELINE_LABEL, gamma)?;
    let levels = [0.5, 1.0, 2.0].map(|sb| stable(&r, &format!("sf=0,sb={sb}"), gamma));
    let levels = levels.into_iter().collect::<Result<Vec<_>, _>>()?;
    let increasing = levels.windows(2).all(|w| w[1] > w[0]);
    let above = levels.iter().all(|l| *l > base);
    Ok((
        increasing && above && grid.sigma_b == [0.5, 1.0, 2.0],
        format!(
            "at gamma={gamma:e}: baseline {base:.4e}, sb=0.5/1/2 -> {}",
            sci(&levels)
        ),
    ))
}

fn intermittent(art: &mut Artefacts) -> Outcome {
    let cfg = load("intermittent_forward.toml");
    let problem = cfg.problem().map_err(err)?;
    let gamma = smallest_step(&cfg.grid);
    let grid = SweepGrid {
        step_sizes: vec![gamma],
        include_baseline: true,
        ..cfg.grid.clone()
    };
    let r = sweep(&grid, &problem).map_err(err)?;
    sweep_artefacts(art, "intermittent", &r)?;
    let base = stable(&r, BASELINE_LABEL, gamma)?;
    let norms = grid
        .intervals
        .iter()
        .map(|dt| stable(&r, &format!("sf=2,sb=0,dt={dt}"), gamma))
        .collect::<Result<Vec<_>, _>>()?;
    let nonincreasing = norms.windows(2).all(|w| w[1] <= w[0]);
    let last = *norms.last().unwrap();
    let within = last.max(base) <= 2.0 * last.min(base);
    Ok((
        nonincreasing && within && grid.intervals == [1, 10, 100, 1000],
        format!(
            "at gamma={gamma:e}: dt=1/10/100/1000 -> {}, baseline {base:.4e}",
            sci(&norms)
        ),
    ))
}

fn admissibility_cells(art: &mut Artefacts) -> Outcome {
    let mut rows = Vec::new();
    let mut cells = 0;
    let mut ok = true;
    for assumption in [Assumption::Nonconvex, Assumption::Pl] {
        for zero_mean in [true, false] {
            for horizon in [10_000u64, 2_000] {
                let (ld, le) = occurrence_limits(assumption, zero_mean, horizon, 1.0);
                for (channel, limit) in [(0, ld), (1, le)] {
                    let inside = limit.floor() as u64;
                    for (count, expect) in [(inside, true), (inside + 1, false)] {
                        let (qd, qe) = if channel == 0 { (count, 0) } else { (0, count) };
                        let v = admissibility(assumption, zero_mean, qd, qe, horizon, 1.0)
                            .map_err(err)?;
                        let got = if channel == 0 { v.forward } else { v.backward };
                        ok &= got.admissible == expect && v.admissible() == expect;
                        rows.push(got);
                    }
                    if horizon == 10_000 {
                        cells += 1;
                    }
                }
            }
        }
    }
    art.push(
        "admissibility",
        csv_string("chainsgd.admissibility.v1", &rows).map_err(err)?,
    );
    Ok((
        ok && cells == 8,
        format!(
            "{cells} cells, {} probes at T in {{10000, 2000}}",
            rows.len()
        ),
    ))
}

fn tensors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut normals =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let mut worst_norm = 0.0_f64;
    let mut worst_contract = 0.0_f64;
    let mut dominated = true;
    for k in 0..50 {
        let (p, m, n) = (1 + k % 4, 1 + (k / 4) % 3, 1 + (k / 12) % 3);
        let h = Tensor3::from_vec(p, m, n, normals(p * m * n)).unwrap();
        let norm = h.operator_norm();
        let svd = h.matricize().svd(false, false).singular_values.max();
        worst_norm = worst_norm.max((norm - svd).abs() / svd.max(1e-300));

        let mut best = 0.0_f64;
        for _ in 0..100_000 {
            let mut a = DMatrix::from_vec(m, n, normals(m * n));
            a /= a.norm();
            best = best.max(h.contract(&a).unwrap().norm());
        }
        dominated &= norm >= best - 1e-12;

        let a = DMatrix::from_vec(m, n, normals(m * n));
        let got = h.contract(&a).unwrap();
        for j in 0..p {
            let mut s = 0.0;
            for i in 0..m {
                for l in 0..n {
                    s += h.get(j, i, l) * a[(i, l)];
                }
            }
            worst_contract = worst_contract.max((got[j] - s).abs());
        }
    }
    Ok((
        worst_norm < 1e-10 && dominated && worst_contract < 1e-12,
        format!(
            "50 tensors: |norm - svd| rel {worst_norm:.1e}, dominates 1e5-sample search: {dominated}, \
             contraction error {worst_contract:.1e} (< 1e-12)"
        ),
    ))
}

fn report(id: &str, label: &str, outcome: Outcome, failures: &mut Vec<String>) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "{} criterion {id}: {label}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        failures.push(id.to_string());
    }
}

fn main() -> ExitCode {
    // Ignore libtest flags such as `--nocapture`; a filter that names no
    // criterion skips the run so `cargo test <name>` stays fast.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut first = Artefacts::default();
    let mut failures = Vec::new();
    report(
        "1",
        "GD bias fixed point",
        gd_bias(&mut first),
        &mut failures,
    );
    report("2", "Top-1 counterexample", top1(&mut first), &mut failures);
    report("3", "sigmoid bias", sigmoid_bias(&mut first), &mut failures);
    report(
        "4",
        "Jacobian correctness",
        jacobians(&mut first),
        &mut failures,
    );
    report(
        "5",
        "gradient error dominance",
        dominance(&mut first),
        &mut failures,
    );
    report(
        "6",
        "rate bound dominance",
        rate_bounds(&mut first),
        &mut failures,
    );
    report(
        "7",
        "frequent zero-mean asymmetry",
        zero_mean_asymmetry(&mut first),
        &mut failures,
    );
    report(
        "8",
        "frequent biased backward",
        biased_backward(&mut first),
        &mut failures,
    );
    report(
        "9",
        "intermittent phase transition",
        intermittent(&mut first),
        &mut failures,
    );
    report(
        "10",
        "admissibility table",
        admissibility_cells(&mut first),
        &mut failures,
    );
    report("11", "tensor module", tensors(), &mut failures);

    let rerun = || -> Outcome {
        let mut second = Artefacts::default();
        let _ = gd_bias(&mut second)?;
        let _ = top1(&mut second)?;
        let _ = sigmoid_bias(&mut second)?;
        let _ = jacobians(&mut second)?;
        let _ = dominance(&mut second)?;
        let _ = rate_bounds(&mut second)?;
        let _ = zero_mean_asymmetry(&mut second)?;
        let _ = biased_backward(&mut second)?;
        let _ = intermittent(&mut second)?;
        let _ = admissibility_cells(&mut second)?;
        let differing: Vec<&str> = first
            .0
            .iter()
            .zip(&second.0)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.as_str())
            .collect();
        let same_set = first.0.len() == second.0.len();
        let bytes: usize = first.0.iter().map(|(_, t)| t.len()).sum();
        Ok((
            same_set && differing.is_empty(),
            format!(
                "{} CSV outputs ({bytes} bytes) rerun, differing: {differing:?}",
                first.0.len()
            ),
        ))
    };
    report("12", "determinism", rerun(), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {}", failures.join(", "));
        ExitCode::FAILURE
    }
}
