//! The three small constructions where perturbed passes visibly break plain
//! gradient descent: a constant forward shift, Top-1 adjoint compression, and
//! a two-point perturbation through a sigmoid.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operator::{
    sigmoid_prime, AffineElementwise, Chain, InnerProductSquare, PassState, Regularizer, Sample,
    ScalarQuadratic, SigmoidShift,
};
use crate::optimizer::{run, RunConfig, RunTrace};
use crate::perturbation::{
    Compressor, Distribution, MomentAccumulator, PerturbationPlan, PlanEntry, Schedule, StreamKey,
};

fn exact_config(gamma: f64, horizon: u64, beta: f64, w0: Vec<f64>) -> RunConfig {
    RunConfig {
        step_size: gamma,
        horizon,
        momentum: beta,
        sampling_noise_std: 0.0,
        record_weights: true,
        initial_weights: Some(w0),
        ..RunConfig::default()
    }
}

/// `y₁ = w·x`, `ℓ = y₁²` with `x = 1`.
pub fn gd_bias_chain() -> Chain {
    Chain::new(
        vec![
            Arc::new(AffineElementwise::new(DMatrix::from_element(1, 1, 1.0))),
            Arc::new(ScalarQuadratic),
        ],
        Regularizer::none(),
    )
    .expect("scalar chain is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GdBiasReport {
    pub delta: f64,
    pub step_size: f64,
    pub iterates: Vec<f64>,
    pub final_iterate: f64,
    pub fixed_point: f64,
    pub gap: f64,
    /// `1 − 2γ`
    pub contraction_factor: f64,
    pub contracting: bool,
    /// `γ < 1/2`, the range where the iterates approach `−δ` monotonically.
    pub claim_applies: bool,
    pub diverged: bool,
    #[serde(skip)]
    pub trace: RunTrace,
}

/// GD on `ℓ(x) = x²` with a constant forward shift `δ`:
/// `x ← (1 − 2γ)x − 2γδ`.
pub fn counterexample_gd_bias(
    delta: f64,
    gamma: f64,
    horizon: u64,
    x0: f64,
) -> Result<GdBiasReport> {
    let chain = gd_bias_chain();
    let data = [Sample::new(vec![1.0], vec![])];
    let plan = PerturbationPlan::clean().with_forward(
        1,
        PlanEntry::new(
            Distribution::Constant { value: vec![delta] },
            Schedule::EveryIteration,
        ),
    );
    let trace = run(
        &chain,
        &data,
        &plan,
        &exact_config(gamma, horizon, 0.0, vec![x0]),
    )?;
    let iterates: Vec<f64> = trace.weights.iter().map(|w| w[0]).collect();
    let final_iterate = *iterates.last().expect("initial iterate is always recorded");
    let contraction_factor = 1.0 - 2.0 * gamma;
    Ok(GdBiasReport {
        delta,
        step_size: gamma,
        final_iterate,
        fixed_point: -delta,
        gap: (final_iterate + delta).abs(),
        contraction_factor,
        contracting: contraction_factor.abs() < 1.0,
        claim_applies: gamma < 0.5,
        diverged: trace.diverged,
        iterates,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Top1Params {
    /// Row-major `[[a, b], [c, d]]`.
    pub a: [[f64; 2]; 2],
    pub s: f64,
    pub gamma: f64,
    pub beta: f64,
    pub horizon: u64,
    /// Norm level used for the convergence verdict.
    pub threshold: f64,
}

impl Top1Params {
    pub fn plain() -> Self {
        Self {
            a: [[-15.0, 13.0], [-5.0, 9.0]],
            s: 1.0,
            gamma: 0.1,
            beta: 0.0,
            horizon: 1000,
            threshold: 0.1,
        }
    }

    pub fn momentum() -> Self {
        Self {
            a: [[-5.0, -4.0], [-5.0, 3.0]],
            s: 1.0,
            gamma: 0.05,
            beta: 0.9,
            horizon: 1000,
            threshold: 1e-3,
        }
    }
}

impl Default for Top1Params {
    fn default() -> Self {
        Self::plain()
    }
}

/// `y₁ = A(w₁ ⊙ x)`, `ℓ = ⟨y₁, w₂⟩² + ½‖y₁‖²` with `x = (1, 1)`.
pub fn top1_chain(a: [[f64; 2]; 2]) -> Chain {
    let m = DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]]);
    Chain::new(
        vec![
            Arc::new(AffineElementwise::new(m)),
            Arc::new(InnerProductSquare::new(2)),
        ],
        Regularizer::none(),
    )
    .expect("two-layer chain is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Top1Verdict {
    pub clean_final_norm: f64,
    pub clean_min_norm: f64,
    /// Over the whole horizon; a diverged run counts as staying above any level.
    pub compressed_min_norm: f64,
    pub compressed_diverged: bool,
    pub clean_converged: bool,
    pub compressed_stalls: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Top1Report {
    pub params: Top1Params,
    /// `‖w₁^{(t)}‖` for `t = 0..`, truncated at divergence.
    pub clean_norms: Vec<f64>,
    pub compressed_norms: Vec<f64>,
    pub verdict: Top1Verdict,
    #[serde(skip)]
    pub clean: RunTrace,
    #[serde(skip)]
    pub compressed: RunTrace,
}

fn first_block_norms(trace: &RunTrace) -> Vec<f64> {
    trace
        .weights
        .iter()
        .map(|w| (w[0] * w[0] + w[1] * w[1]).sqrt())
        .collect()
}

/// Clean and Top-1-compressed runs from `w = (s, s, 0, 0)`. The second layer's
/// weights stay at zero because their gradient is proportional to `⟨y₁, w₂⟩`.
pub fn counterexample_top1(params: &Top1Params) -> Result<Top1Report> {
    let chain = top1_chain(params.a);
    let data = [Sample::new(vec![1.0, 1.0], vec![])];
    let cfg = exact_config(
        params.gamma,
        params.horizon,
        params.beta,
        vec![params.s, params.s, 0.0, 0.0],
    );
    let clean = run(&chain, &data, &PerturbationPlan::clean(), &cfg)?;
    let plan = PerturbationPlan::clean()
        .with_backward(2, PlanEntry::compressor(Compressor::TopK { k: 1 }));
    let compressed = run(&chain, &data, &plan, &cfg)?;
    let clean_norms = first_block_norms(&clean);
    let compressed_norms = first_block_norms(&compressed);
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let clean_final_norm = if clean.diverged {
        f64::INFINITY
    } else {
        *clean_norms.last().unwrap_or(&f64::NAN)
    };
    let compressed_min_norm = min(&compressed_norms);
    let verdict = Top1Verdict {
        clean_final_norm,
        clean_min_norm: min(&clean_norms),
        compressed_min_norm,
        compressed_diverged: compressed.diverged,
        clean_converged: clean_final_norm < params.threshold,
        compressed_stalls: compressed_min_norm > params.threshold,
    };
    Ok(Top1Report {
        params: *params,
        clean_norms,
        compressed_norms,
        verdict,
        clean,
        compressed,
    })
}

/// The `(clean, top1)` trace pair for the momentum setting, or for any other
/// parameters passed in.
pub fn run_momentum_counterexample(params: &Top1Params) -> Result<(RunTrace, RunTrace)> {
    let r = counterexample_top1(params)?;
    Ok((r.clean, r.compressed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmoidBiasReport {
    pub a: f64,
    /// `σ′(0)`
    pub clean_derivative: f64,
    /// `E[σ′(±a)] = σ′(a)`
    pub expected_derivative: f64,
    pub bias: f64,
    pub draws: usize,
    pub mc_mean: f64,
    pub mc_std_error: f64,
    pub mc_bias: f64,
    /// `|mc_bias − bias| ≤ 3·SE`; with a zero standard error, exact equality.
    pub mc_agrees: bool,
}

/// `y₁ = w·x` at `w = 0`, `x = 1`, then `ℓ = σ(y₁ + b)` at `b = 0`. The forward
/// output of the first layer is shifted by `±a` with equal probability; the
/// reported derivative is the gradient in `b`, which equals `σ′(ỹ₁)`.
pub fn sigmoid_bias_chain() -> Chain {
    Chain::new(
        vec![
            Arc::new(AffineElementwise::new(DMatrix::from_element(1, 1, 1.0))),
            Arc::new(SigmoidShift),
        ],
        Regularizer::none(),
    )
    .expect("scalar chain is well formed")
}

pub fn sigmoid_bias_plan(a: f64) -> PerturbationPlan {
    PerturbationPlan::clean().with_forward(
        1,
        PlanEntry::new(
            Distribution::TwoPoint { magnitude: a },
            Schedule::EveryIteration,
        ),
    )
}

pub fn counterexample_sigmoid_bias(a: f64, draws: usize, seed: u64) -> Result<SigmoidBiasReport> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidConfig(
            "the two-point magnitude must be positive".into(),
        ));
    }
    if draws < 2 {
        return Err(Error::InvalidConfig(
            "at least two Monte Carlo draws are needed".into(),
        ));
    }
    let chain = sigmoid_bias_chain();
    let plan = sigmoid_bias_plan(a);
    let sample = Sample::new(vec![1.0], vec![]);
    let w = [0.0, 0.0];
    let mut state = PassState::new(&chain);
    let mut acc = MomentAccumulator::new(1);
    for k in 0..draws {
        chain.gradient(
            &sample,
            &w,
            Some((&plan, StreamKey::new(seed, k as u64, 0))),
            &mut state,
        )?;
        acc.push(&state.weight_grads[1..2]);
    }
    let mc_mean = acc.mean()[0];
    let mc_std_error = (acc.variance()[0] / draws as f64).sqrt();
    let clean_derivative = sigmoid_prime(0.0);
    let expected_derivative = sigmoid_prime(a);
    let bias = clean_derivative - expected_derivative;
    let mc_bias = clean_derivative - mc_mean;
    Ok(SigmoidBiasReport {
        a,
        clean_derivative,
        expected_derivative,
        bias,
        draws,
        mc_mean,
        mc_std_error,
        mc_bias,
        mc_agrees: (mc_bias - bias).abs() <= 3.0 * mc_std_error,
    })
}
