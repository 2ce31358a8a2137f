//! Gradient descent loops over a chain with clean or perturbed passes, plus the
//! EWMA-based stability metrics.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{Chain, PassState, Sample};
use crate::perturbation::{PerturbationPlan, StreamKey};

/// Slot and tag values reserved for the optimizer's own draws.
const SLOT_NOISE: u64 = u64::MAX;
const SLOT_INDEX: u64 = u64::MAX - 1;
const TAG_NOISE: u64 = u64::MAX;
const TAG_INDEX: u64 = u64::MAX - 1;

pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One uniformly drawn sample per iteration, plus Gaussian noise.
    Stochastic,
    /// Full-batch perturbed gradient, plus Gaussian noise when `σ_n > 0`.
    #[default]
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub step_size: f64,
    pub horizon: u64,
    pub momentum: f64,
    pub sampling_noise_std: f64,
    pub seed: u64,
    pub ewma_lambda: f64,
    pub mode: Mode,
    /// Evaluate the true gradient every `metric_stride` iterations.
    pub metric_stride: u64,
    pub record_weights: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_weights: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            horizon: 20_000,
            momentum: 0.0,
            sampling_noise_std: 0.001,
            seed: 0,
            ewma_lambda: 0.99,
            mode: Mode::Deterministic,
            metric_stride: 1,
            record_weights: false,
            initial_weights: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.sampling_noise_std >= 0.0 && self.sampling_noise_std.is_finite()) {
            return bad("sampling noise std must be nonnegative");
        }
        if !(self.ewma_lambda > 0.0 && self.ewma_lambda < 1.0) {
            return bad("ewma coefficient must lie in (0, 1)");
        }
        if self.metric_stride == 0 {
            return bad("metric stride must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    /// Iteration index of each metric sample.
    pub iterations: Vec<u64>,
    /// `‖∇ℓ(w_t)‖` of the full, clean objective.
    pub grad_norm: Vec<f64>,
    pub loss: Vec<f64>,
    pub ewma: Vec<f64>,
    pub ewma_lambda: f64,
    /// Per iteration: whether any forward / backward perturbation was nonzero.
    pub delta_active: Vec<bool>,
    pub eps_active: Vec<bool>,
    /// Per iteration: `Σ_i ‖δ_i‖²` (resp. `ε`), averaged over the samples used.
    pub delta_sq: Vec<f64>,
    pub eps_sq: Vec<f64>,
    /// `w_0, w_1, …` when recording is enabled.
    pub weights: Vec<Vec<f64>>,
    pub final_weights: Vec<f64>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
    pub q_delta: u64,
    pub q_eps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityMetrics {
    pub stable_gradient_norm: f64,
    pub stable_iteration: Option<u64>,
}

/// `s_0 = x_0`, `s_t = λ s_{t-1} + (1-λ) x_t`.
pub fn ewma(series: &[f64], lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut s = 0.0;
    for (t, x) in series.iter().enumerate() {
        s = if t == 0 {
            *x
        } else {
            lambda * s + (1.0 - lambda) * x
        };
        out.push(s);
    }
    out
}

/// Mean EWMA over the last half of the run, and the first iteration whose EWMA
/// falls below 1.5 times that level.
pub fn stability_metrics(trace: &RunTrace) -> StabilityMetrics {
    let finite: Vec<f64> = trace
        .ewma
        .iter()
        .cloned()
        .take_while(|x| x.is_finite())
        .collect();
    if trace.diverged || finite.len() < trace.ewma.len() {
        return StabilityMetrics {
            stable_gradient_norm: finite.last().cloned().unwrap_or(f64::NAN),
            stable_iteration: None,
        };
    }
    let n = finite.len();
    if n == 0 {
        return StabilityMetrics {
            stable_gradient_norm: f64::NAN,
            stable_iteration: None,
        };
    }
    let window = (n / 2).max(1);
    let stable = finite[n - window..].iter().sum::<f64>() / window as f64;
    let idx = finite.iter().position(|s| *s < 1.5 * stable);
    StabilityMetrics {
        stable_gradient_norm: stable,
        stable_iteration: idx.map(|i| trace.iterations[i]),
    }
}

/// Mean of the clean per-sample gradients, without the regularizer.
pub fn full_data_gradient(
    chain: &Chain,
    data: &[Sample],
    w: &[f64],
    state: &mut PassState,
    out: &mut [f64],
) -> Result<f64> {
    out.fill(0.0);
    let mut loss = 0.0;
    for s in data {
        chain.gradient(s, w, None, state)?;
        loss += state.loss();
        for (o, u) in out.iter_mut().zip(&state.weight_grads) {
            *o += u;
        }
    }
    let m = data.len() as f64;
    for o in out.iter_mut() {
        *o /= m;
    }
    Ok(loss / m)
}

/// `(ℓ(w), ∇ℓ(w))` of the full objective including `ρR`.
pub fn full_objective(chain: &Chain, data: &[Sample], w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut st = PassState::new(chain);
    let mut g = vec![0.0; chain.weight_dim()];
    let loss = full_data_gradient(chain, data, w, &mut st, &mut g)? + chain.regularizer().value(w);
    chain.regularizer().add_gradient(w, &mut g);
    Ok((loss, g))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Step {
    delta_active: bool,
    eps_active: bool,
    delta_sq: f64,
    eps_sq: f64,
}

#[allow(clippy::too_many_arguments)]
fn perturbed_gradient(
    chain: &Chain,
    data: &[Sample],
    plan: &PerturbationPlan,
    cfg: &RunConfig,
    t: u64,
    w: &[f64],
    state: &mut PassState,
    out: &mut [f64],
) -> Result<Step> {
    out.fill(0.0);
    let mut step = Step {
        delta_active: false,
        eps_active: false,
        delta_sq: 0.0,
        eps_sq: 0.0,
    };
    let mut acc = |state: &PassState, out: &mut [f64]| {
        for (o, u) in out.iter_mut().zip(&state.weight_grads) {
            *o += u;
        }
        step.delta_active |= state.any_delta();
        step.eps_active |= state.any_eps();
        step.delta_sq += state.delta_sq();
        step.eps_sq += state.eps_sq();
    };
    let used = match cfg.mode {
        Mode::Deterministic => {
            for (l, s) in data.iter().enumerate() {
                chain.gradient(
                    s,
                    w,
                    Some((plan, StreamKey::new(cfg.seed, t, l as u64))),
                    state,
                )?;
                acc(state, out);
            }
            data.len()
        }
        Mode::Stochastic => {
            let l = StreamKey::new(cfg.seed, t, SLOT_INDEX)
                .rng(TAG_INDEX)
                .random_range(0..data.len());
            chain.gradient(
                &data[l],
                w,
                Some((plan, StreamKey::new(cfg.seed, t, l as u64))),
                state,
            )?;
            acc(state, out);
            1
        }
    };
    let m = used as f64;
    for o in out.iter_mut() {
        *o /= m;
    }
    step.delta_sq /= m;
    step.eps_sq /= m;
    Ok(step)
}

/// Iterates `w ← w − γ(ũ + r + ξ) + β(w − w_prev)` for `T` steps. The recorded
/// metric is the clean full-batch gradient norm at each evaluated `w_t`.
pub fn run(
    chain: &Chain,
    data: &[Sample],
    plan: &PerturbationPlan,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    cfg.validate()?;
    plan.validate(chain)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let d = chain.weight_dim();
    let mut w = match &cfg.initial_weights {
        Some(w0) if w0.len() != d => {
            return Err(Error::DimensionMismatch {
                context: "initial weights",
                expected: d,
                got: w0.len(),
            })
        }
        Some(w0) => w0.clone(),
        None => vec![0.0; d],
    };
    let mut prev = w.clone();
    let mut state = PassState::new(chain);
    let mut g_true = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut next = vec![0.0; d];
    let reuse_clean = plan.is_clean() && cfg.mode == Mode::Deterministic;
    let cap = cfg.horizon as usize;
    let mut trace = RunTrace {
        ewma_lambda: cfg.ewma_lambda,
        delta_active: Vec::with_capacity(cap),
        eps_active: Vec::with_capacity(cap),
        delta_sq: Vec::with_capacity(cap),
        eps_sq: Vec::with_capacity(cap),
        ..Default::default()
    };
    if cfg.record_weights {
        trace.weights.push(w.clone());
    }
    let mut ewma_state = 0.0;

    for t in 0..cfg.horizon {
        let evaluate = t % cfg.metric_stride == 0;
        let mut have_true = false;
        if evaluate || reuse_clean {
            match full_data_gradient(chain, data, &w, &mut state, &mut g_true) {
                Ok(loss) => {
                    chain.regularizer().add_gradient(&w, &mut g_true);
                    have_true = true;
                    if evaluate {
                        let gn = norm(&g_true);
                        let first = trace.grad_norm.is_empty();
                        ewma_state = if first {
                            gn
                        } else {
                            cfg.ewma_lambda * ewma_state + (1.0 - cfg.ewma_lambda) * gn
                        };
                        trace.iterations.push(t);
                        trace.grad_norm.push(gn);
                        trace.loss.push(loss + chain.regularizer().value(&w));
                        trace.ewma.push(ewma_state);
                    }
                }
                Err(Error::NonFinite(_)) => {
                    trace.diverged = true;
                    trace.diverged_at = Some(t);
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let step = if reuse_clean && have_true {
            // A clean plan yields the clean gradient; reuse it.
            g.copy_from_slice(&g_true);
            Step {
                delta_active: false,
                eps_active: false,
                delta_sq: 0.0,
                eps_sq: 0.0,
            }
        } else {
            match perturbed_gradient(chain, data, plan, cfg, t, &w, &mut state, &mut g) {
                Ok(s) => {
                    chain.regularizer().add_gradient(&w, &mut g);
                    s
                }
                Err(Error::NonFinite(_)) => {
                    trace.diverged = true;
                    trace.diverged_at = Some(t);
                    break;
                }
                Err(e) => return Err(e),
            }
        };
        trace.delta_active.push(step.delta_active);
        trace.eps_active.push(step.eps_active);
        trace.delta_sq.push(step.delta_sq);
        trace.eps_sq.push(step.eps_sq);

        if cfg.sampling_noise_std > 0.0 {
            let mut rng = StreamKey::new(cfg.seed, t, SLOT_NOISE).rng(TAG_NOISE);
            for gi in g.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *gi += cfg.sampling_noise_std * z;
            }
        }
        for k in 0..d {
            next[k] = w[k] - cfg.step_size * g[k] + cfg.momentum * (w[k] - prev[k]);
        }
        std::mem::swap(&mut prev, &mut w);
        std::mem::swap(&mut w, &mut next);
        if cfg.record_weights {
            trace.weights.push(w.clone());
        }
        if w.iter().any(|x| !x.is_finite()) || norm(&w) > DIVERGENCE_NORM {
            trace.diverged = true;
            trace.diverged_at = Some(t);
            break;
        }
    }
    trace.final_weights = w;
    trace.q_delta = trace.delta_active.iter().filter(|a| **a).count() as u64;
    trace.q_eps = trace.eps_active.iter().filter(|a| **a).count() as u64;
    Ok(trace)
}
