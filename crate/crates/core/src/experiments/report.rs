//! Joins the theoretical bounds with empirical statistics of perturbed passes
//! and runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{loss_star_oracle, Problem};
use super::sweep::{hex_digest, problem_fingerprint};
use crate::bounds::{
    admissibility, bias_bound, coefficients, estimate_constants_empirical, lipschitz_from_points,
    nonconvex_rate_bound, per_iteration_terms, pl_rate_bound, variance_bound, Assumption,
    BoundCoefficients, CorpusState, EmpiricalConstants, PerLayerMoments, SmoothnessConstants,
    MAX_CORPUS_PAIRS,
};
use crate::error::{Error, Result};
use crate::operator::{Chain, PassState, Sample};
use crate::optimizer::{full_data_gradient, run, Mode, RunConfig, RunTrace};
use crate::perturbation::{mix_seed, MomentAccumulator, PassKind, PerturbationPlan, StreamKey};

/// The operator states a finished forward pass visited, one per layer.
pub fn pass_states(
    chain: &Chain,
    sample: &Sample,
    w: &[f64],
    state: &PassState,
) -> Vec<CorpusState> {
    (1..=chain.n_layers())
        .map(|i| CorpusState {
            layer: i,
            input: state.outputs[i - 1].clone(),
            weight: chain.layer_weights(w, i).to_vec(),
            ctx: sample.ctx.clone(),
        })
        .collect()
}

/// Appends the perturbed states that differ from their clean counterparts.
fn push_new_states(
    corpus: &mut Vec<CorpusState>,
    clean: &[CorpusState],
    perturbed: Vec<CorpusState>,
) {
    for (c, p) in clean.iter().zip(perturbed) {
        if c.input != p.input {
            corpus.push(p);
        }
    }
}

/// Per-layer moments of the perturbations a plan actually realized; used for
/// state-dependent entries such as compressors.
struct RealizedMoments {
    delta: Vec<MomentAccumulator>,
    eps: Vec<MomentAccumulator>,
}

impl RealizedMoments {
    fn new(chain: &Chain) -> Self {
        let n = chain.n_layers();
        Self {
            delta: (1..n)
                .map(|i| {
                    MomentAccumulator::new(PerturbationPlan::target_dim(
                        chain,
                        PassKind::Forward,
                        i,
                    ))
                })
                .collect(),
            eps: (1..n)
                .map(|i| {
                    MomentAccumulator::new(PerturbationPlan::target_dim(
                        chain,
                        PassKind::Backward,
                        i + 1,
                    ))
                })
                .collect(),
        }
    }

    fn push(&mut self, state: &PassState) {
        for (i, acc) in self.delta.iter_mut().enumerate() {
            acc.push(&state.delta[i + 1]);
        }
        for (i, acc) in self.eps.iter_mut().enumerate() {
            acc.push(&state.eps[i + 2]);
        }
    }

    fn summary(&self) -> PerLayerMoments {
        PerLayerMoments {
            delta: self.delta.iter().map(|a| a.summary()).collect(),
            eps: self.eps.iter().map(|a| a.summary()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DominanceOptions {
    pub points: usize,
    pub trials: usize,
    /// Weight points are drawn from `N(0, weight_scale² I)`.
    pub weight_scale: f64,
    pub seed: u64,
    pub max_pairs: usize,
}

impl Default for DominanceOptions {
    fn default() -> Self {
        Self {
            points: 10,
            trials: 1000,
            weight_scale: 1.0,
            seed: 0,
            max_pairs: MAX_CORPUS_PAIRS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominancePoint {
    pub sample: usize,
    pub weights: Vec<f64>,
    /// `E‖ũ − u‖²`
    pub empirical_variance: f64,
    /// `‖E[ũ − u]‖²`
    pub empirical_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    pub constants: EmpiricalConstants,
    pub coefficients: BoundCoefficients,
    pub moments: PerLayerMoments,
    pub variance_bound: f64,
    pub bias_bound: f64,
    pub points: Vec<DominancePoint>,
    pub violations: usize,
}

/// Monte Carlo estimates of the gradient error at random `(sample, w)` points
/// against the variance and bias bounds, with operator constants estimated
/// over every state the clean and perturbed passes visited.
pub fn gradient_error_dominance(
    problem: &Problem,
    plan: &PerturbationPlan,
    opts: &DominanceOptions,
) -> Result<DominanceReport> {
    let chain = &problem.chain;
    plan.validate(chain)?;
    if opts.points == 0 || opts.trials == 0 {
        return Err(Error::InvalidConfig(
            "dominance needs at least one point and one trial".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, 0xd0]));
    let d = chain.weight_dim();
    let mut state = PassState::new(chain);
    let mut corpus = Vec::new();
    let mut realized = RealizedMoments::new(chain);
    let mut rows = Vec::with_capacity(opts.points);
    for p in 0..opts.points {
        let sample_idx = rng.random_range(0..problem.samples.len());
        let w: Vec<f64> = (0..d)
            .map(|_| opts.weight_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sample = &problem.samples[sample_idx];
        chain.gradient(sample, &w, None, &mut state)?;
        let clean_grad = state.weight_grads.clone();
        let clean_states = pass_states(chain, sample, &w, &state);
        corpus.extend(clean_states.iter().cloned());
        let mut acc = MomentAccumulator::new(d);
        let mut diff = vec![0.0; d];
        for k in 0..opts.trials {
            let key = StreamKey::new(mix_seed(&[opts.seed, 0x7a]), k as u64, p as u64);
            chain.gradient(sample, &w, Some((plan, key)), &mut state)?;
            for ((o, a), b) in diff.iter_mut().zip(&state.weight_grads).zip(&clean_grad) {
                *o = a - b;
            }
            acc.push(&diff);
            realized.push(&state);
            push_new_states(
                &mut corpus,
                &clean_states,
                pass_states(chain, sample, &w, &state),
            );
        }
        let s = acc.summary();
        rows.push(DominancePoint {
            sample: sample_idx,
            weights: w,
            empirical_variance: s.second_moment,
            empirical_bias: s.mean_norm_sq,
        });
    }
    let constants = estimate_constants_empirical(chain, &corpus, opts.max_pairs, opts.seed)?;
    let coeffs = coefficients(&constants.constants);
    // State-dependent entries only have realized moments.
    let moments =
        PerLayerMoments::from_plan(chain, plan, None).unwrap_or_else(|_| realized.summary());
    let vb = variance_bound(&coeffs, &moments);
    let bb = bias_bound(&coeffs, &moments);
    let violations = rows
        .iter()
        .filter(|r| r.empirical_variance > vb || r.empirical_bias > bb)
        .count();
    Ok(DominanceReport {
        constants,
        coefficients: coeffs,
        moments,
        variance_bound: vb,
        bias_bound: bb,
        points: rows,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateCheckOptions {
    /// Iterates sampled from the trace for the state corpus and `L_∇ℓ` points.
    pub corpus_iterates: usize,
    /// Radius of the random probes added around sampled iterates.
    pub probe_scale: f64,
    pub max_pairs: usize,
    pub seed: u64,
    /// Stands in for `ℓ*` when the problem is not strongly convex.
    pub loss_lower_bound: f64,
    pub oracle_tolerance: f64,
}

impl Default for RateCheckOptions {
    fn default() -> Self {
        Self {
            corpus_iterates: 50,
            probe_scale: 0.1,
            max_pairs: MAX_CORPUS_PAIRS,
            seed: 0,
            loss_lower_bound: 0.0,
            oracle_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub constants: SmoothnessConstants,
    pub corpus_size: usize,
    pub step_size: f64,
    pub horizon: u64,
    pub loss_star: f64,
    /// Whether `loss_star` came from the oracle rather than the lower bound.
    pub loss_star_certified: bool,
    pub delta0: f64,
    /// `(1/T) Σ_t ‖∇ℓ(w_t)‖²`
    pub empirical_mean_grad_sq: f64,
    pub nonconvex_bound: f64,
    /// `ℓ(w_T) − ℓ*`
    pub empirical_gap: f64,
    pub pl_bound: Option<f64>,
    pub trace: RunTrace,
}

fn sampled_indices(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let count = count.clamp(1, len);
    if count == 1 {
        return vec![len - 1];
    }
    let mut out: Vec<usize> = (0..count).map(|k| k * (len - 1) / (count - 1)).collect();
    out.dedup();
    out
}

/// Runs `cfg` once and evaluates both rate bounds with constants estimated on
/// the region the run visited.
pub fn rate_bound_check(
    problem: &Problem,
    plan: &PerturbationPlan,
    cfg: &RunConfig,
    opts: &RateCheckOptions,
) -> Result<RateReport> {
    let chain = &problem.chain;
    let cfg = RunConfig {
        record_weights: true,
        metric_stride: 1,
        ..cfg.clone()
    };
    let trace = run(chain, &problem.samples, plan, &cfg)?;
    if trace.diverged {
        return Err(Error::NonFinite("rate check run diverged"));
    }
    let d = chain.weight_dim();
    let mut state = PassState::new(chain);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, 0x9a]));
    let mut corpus = Vec::new();
    let mut grad_points = Vec::new();
    let mut per_sample_var = 0.0_f64;
    let mut g = vec![0.0; d];
    for (k, &idx) in sampled_indices(trace.weights.len(), opts.corpus_iterates)
        .iter()
        .enumerate()
    {
        let w = &trace.weights[idx];
        let mut sample_grads = Vec::with_capacity(problem.samples.len());
        for (l, s) in problem.samples.iter().enumerate() {
            chain.gradient(s, w, None, &mut state)?;
            sample_grads.push(state.weight_grads.clone());
            let clean = pass_states(chain, s, w, &state);
            corpus.extend(clean.iter().cloned());
            if !plan.is_clean() {
                let key = StreamKey::new(mix_seed(&[opts.seed, 0x51]), k as u64, l as u64);
                chain.forward(s, w, Some((plan, key)), &mut state)?;
                push_new_states(&mut corpus, &clean, pass_states(chain, s, w, &state));
            }
        }
        if cfg.mode == Mode::Stochastic {
            let m = sample_grads.len() as f64;
            let mean: Vec<f64> = (0..d)
                .map(|j| sample_grads.iter().map(|u| u[j]).sum::<f64>() / m)
                .collect();
            let var = sample_grads
                .iter()
                .map(|u| {
                    u.iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            per_sample_var = per_sample_var.max(var);
        }
        full_data_gradient(chain, &problem.samples, w, &mut state, &mut g)?;
        chain.regularizer().add_gradient(w, &mut g);
        grad_points.push((w.clone(), g.clone()));
        let probe: Vec<f64> = w
            .iter()
            .map(|x| {
                x + opts.probe_scale * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()
            })
            .collect();
        full_data_gradient(chain, &problem.samples, &probe, &mut state, &mut g)?;
        chain.regularizer().add_gradient(&probe, &mut g);
        grad_points.push((probe, g.clone()));
    }
    let empirical = estimate_constants_empirical(chain, &corpus, opts.max_pairs, opts.seed)?;
    let mut consts = empirical.constants;
    consts.l_loss =
        lipschitz_from_points(&grad_points, opts.max_pairs, opts.seed).ok_or_else(|| {
            Error::ConstantsUnavailable("too few points for the gradient Lipschitz constant".into())
        })?;
    consts.mu = chain.regularizer().strong_convexity();
    consts.sigma = (d as f64 * cfg.sampling_noise_std.powi(2) + per_sample_var).sqrt();

    let (loss_star, certified) = match loss_star_oracle(problem, opts.oracle_tolerance) {
        Ok(r) => (r.loss, true),
        Err(Error::OptimumUnavailable(_)) => (opts.loss_lower_bound, false),
        Err(e) => return Err(e),
    };
    let (l0, _) = problem.objective(&trace.weights[0])?;
    let (lt, _) = problem.objective(&trace.final_weights)?;
    let delta0 = l0 - loss_star;
    let coeffs = coefficients(&consts);
    let (v, b) = per_iteration_terms(&coeffs, chain, plan, cfg.horizon)?;
    let nonconvex_bound =
        nonconvex_rate_bound(&consts, cfg.step_size, cfg.horizon, delta0, &v, &b)?;
    let pl_bound = match consts.mu {
        Some(_) if certified => Some(pl_rate_bound(
            &consts,
            cfg.step_size,
            cfg.horizon,
            delta0,
            &v,
            &b,
        )?),
        _ => None,
    };
    let empirical_mean_grad_sq =
        trace.grad_norm.iter().map(|x| x * x).sum::<f64>() / trace.grad_norm.len().max(1) as f64;
    Ok(RateReport {
        constants: consts,
        corpus_size: empirical.corpus_size,
        step_size: cfg.step_size,
        horizon: cfg.horizon,
        loss_star,
        loss_star_certified: certified,
        delta0,
        empirical_mean_grad_sq,
        nonconvex_bound,
        empirical_gap: lt - loss_star,
        pl_bound,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// Dominance row: `empirical ≤ theoretical` must hold.
    Dominance,
    /// Informational verdict such as admissibility; never a violation.
    Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub config_hash: String,
    pub quantity: String,
    pub kind: RowKind,
    pub theoretical: f64,
    pub empirical: f64,
    pub margin: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundReportOptions {
    pub dominance: DominanceOptions,
    pub rate: RateCheckOptions,
    pub check_rate: bool,
    pub slack: f64,
    /// Estimate operator constants over visited states when none are supplied.
    pub estimate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<SmoothnessConstants>,
}

impl Default for BoundReportOptions {
    fn default() -> Self {
        Self {
            dominance: DominanceOptions::default(),
            rate: RateCheckOptions::default(),
            check_rate: true,
            slack: 1.0,
            estimate: true,
            constants: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub violations: usize,
}

fn row(
    hash: &str,
    quantity: String,
    kind: RowKind,
    theoretical: f64,
    empirical: f64,
    ok: bool,
) -> BoundRow {
    BoundRow {
        config_hash: hash.to_string(),
        quantity,
        kind,
        theoretical,
        empirical,
        margin: theoretical - empirical,
        ok,
    }
}

/// Variance and bias rows per Monte Carlo point, the two rate rows, and the
/// occurrence-count admissibility of the run's `(Q_δ, Q_ε)`.
pub fn bound_report(
    problem: &Problem,
    plan: &PerturbationPlan,
    cfg: &RunConfig,
    opts: &BoundReportOptions,
) -> Result<BoundReport> {
    if !opts.estimate && opts.constants.is_none() {
        return Err(Error::ConstantsUnavailable(
            "no constants supplied; set `estimate = true` or provide [bounds.constants]".into(),
        ));
    }
    let hash = hex_digest(&format!(
        "{}|{:?}|{:?}|{:?}",
        problem_fingerprint(problem),
        plan,
        cfg,
        opts
    ));
    let chain = &problem.chain;
    let mut rows = Vec::new();

    let dom = gradient_error_dominance(problem, plan, &opts.dominance)?;
    let (vb, bb) = match &opts.constants {
        Some(k) => {
            k.validate()?;
            let c = coefficients(k);
            (
                variance_bound(&c, &dom.moments),
                bias_bound(&c, &dom.moments),
            )
        }
        None => (dom.variance_bound, dom.bias_bound),
    };
    for (k, p) in dom.points.iter().enumerate() {
        let v = p.empirical_variance;
        let b = p.empirical_bias;
        rows.push(row(
            &hash,
            format!("variance@point{k}"),
            RowKind::Dominance,
            vb,
            v,
            v <= vb,
        ));
        rows.push(row(
            &hash,
            format!("bias@point{k}"),
            RowKind::Dominance,
            bb,
            b,
            b <= bb,
        ));
    }

    let trace = if opts.check_rate {
        let r = rate_bound_check(problem, plan, cfg, &opts.rate)?;
        let (e, t) = (r.empirical_mean_grad_sq, r.nonconvex_bound);
        rows.push(row(
            &hash,
            "nonconvex_rate".into(),
            RowKind::Dominance,
            t,
            e,
            e <= t,
        ));
        if let Some(t) = r.pl_bound {
            let e = r.empirical_gap;
            rows.push(row(
                &hash,
                "pl_rate".into(),
                RowKind::Dominance,
                t,
                e,
                e <= t,
            ));
        }
        r.trace
    } else {
        run(chain, &problem.samples, plan, cfg)?
    };

    let assumption = if chain.regularizer().strong_convexity().is_some() {
        Assumption::Pl
    } else {
        Assumption::Nonconvex
    };
    let zero_mean = dom
        .moments
        .delta
        .iter()
        .chain(&dom.moments.eps)
        .all(|m| m.mean_norm_sq == 0.0);
    let horizon = trace.delta_active.len().max(1) as u64;
    let verdict = admissibility(
        assumption,
        zero_mean,
        trace.q_delta,
        trace.q_eps,
        horizon,
        opts.slack,
    )?;
    for (name, ch) in [
        ("admissibility_forward", verdict.forward),
        ("admissibility_backward", verdict.backward),
    ] {
        rows.push(row(
            &hash,
            name.into(),
            RowKind::Verdict,
            ch.limit,
            ch.count,
            ch.admissible,
        ));
    }
    let violations = rows
        .iter()
        .filter(|r| r.kind == RowKind::Dominance && !r.ok)
        .count();
    Ok(BoundReport { rows, violations })
}
