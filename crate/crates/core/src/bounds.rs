//! Error-propagation coefficients, gradient-error and convergence-rate bounds,
//! occurrence budgets, and empirical estimation of the smoothness constants.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{full_hessian, full_jacobian, Chain, Operator};
use crate::perturbation::{analytic_moments, MomentSummary, PassKind, PerturbationPlan};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub n_layers: usize,
    /// Bound on `‖∇₁f_i‖_op` and `‖∇₂f_i‖_op`.
    pub c_grad: f64,
    /// Bound on `‖∇²₂₁f_i‖_op`.
    pub c_hess: f64,
    pub l_f: f64,
    pub l_grad: f64,
    pub l_hess: f64,
    /// Lipschitz constant of `∇ℓ`.
    pub l_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub sigma: f64,
}

impl SmoothnessConstants {
    /// All operator constants equal to `c`; loss constants set to 1, no noise.
    pub fn uniform(n_layers: usize, c: f64) -> Self {
        Self {
            n_layers,
            c_grad: c,
            c_hess: c,
            l_f: c,
            l_grad: c,
            l_hess: c,
            l_loss: 1.0,
            mu: None,
            sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.c_grad,
            self.c_hess,
            self.l_f,
            self.l_grad,
            self.l_hess,
            self.l_loss,
            self.sigma,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(
                "smoothness constants must be finite and nonnegative".into(),
            ));
        }
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig(
                "chain length must be at least 2".into(),
            ));
        }
        if let Some(mu) = self.mu {
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(Error::InvalidConfig(
                    "mu must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Coefficient arrays indexed by `i = 1..N-1` (stored at `i - 1`). The `eps`
/// arrays belong to `ε_{i+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCoefficients {
    pub c_v: f64,
    pub var_delta: Vec<f64>,
    pub var_eps: Vec<f64>,
    pub bias_delta: Vec<f64>,
    pub bias_delta_tilde: Vec<f64>,
    pub bias_eps: Vec<f64>,
    /// `C_{y_i}²`
    pub c_y_sq: Vec<f64>,
}

/// `max{1, C_∇f^N}`.
pub fn c_v(consts: &SmoothnessConstants) -> f64 {
    consts.c_grad.powi(consts.n_layers as i32).max(1.0)
}

/// `Σ_{k=a}^{b} q^k` (zero when `a > b`).
fn geo(q: f64, a: usize, b: usize) -> f64 {
    (a..=b).map(|k| q.powi(k as i32)).sum()
}

/// `(C^e_{δi}, C^e_{ε(i+1)})` for `i = 1..N-1`.
pub fn error_coefficients(consts: &SmoothnessConstants) -> (Vec<f64>, Vec<f64>) {
    let n = consts.n_layers;
    let cv2 = c_v(consts).powi(2);
    let q = 3.0 * consts.c_grad * consts.c_grad;
    let r = 2.0 * consts.l_f * consts.l_f;
    let delta = (1..n)
        .map(|i| {
            let s: f64 = (i..n).map(|j| geo(q, 0, j) * r.powi((j - i) as i32)).sum();
            4.0 * cv2 * consts.l_grad * consts.l_grad * s
        })
        .collect();
    let eps = (1..n).map(|i| geo(q, 1, i)).collect();
    (delta, eps)
}

/// `(C^b_{δi}, C̃^b_{δi}, C^b_{ε(i+1)}, C_{y_i}²)` for `i = 1..N-1`.
pub fn bias_coefficients(consts: &SmoothnessConstants) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = consts.n_layers;
    let cv2 = c_v(consts).powi(2);
    let c2 = consts.c_grad * consts.c_grad;
    let q = 3.0 * c2;
    let r = 4.0 * c2;
    let lh2 = consts.l_hess * consts.l_hess;
    let delta: Vec<f64> = (1..n)
        .map(|i| {
            let s: f64 = (i..n).map(|j| geo(q, 0, j) * r.powi((j - i) as i32)).sum();
            8.0 * lh2 * cv2 * s
        })
        .collect();
    let eps: Vec<f64> = (1..n).map(|i| 2.0 * geo(q, 1, i)).collect();
    let c_y_sq: Vec<f64> = (1..n)
        .map(|i| {
            let s: f64 = (i + 1..n)
                .map(|j| geo(q, 0, j) * r.powi((j - i - 1) as i32))
                .sum();
            8.0 * consts.c_hess.powi(2) * consts.l_grad.powi(2) * cv2 * s
                + 2.0 * lh2 * cv2 * geo(q, 0, i)
        })
        .collect();
    let lf4 = 8.0 * consts.l_f.powi(4);
    let tilde = (1..n)
        .map(|i| {
            8.0 * (i..n)
                .map(|j| c_y_sq[j - 1] * lf4.powi((j - i) as i32))
                .sum::<f64>()
        })
        .collect();
    (delta, tilde, eps, c_y_sq)
}

pub fn coefficients(consts: &SmoothnessConstants) -> BoundCoefficients {
    let (var_delta, var_eps) = error_coefficients(consts);
    let (bias_delta, bias_delta_tilde, bias_eps, c_y_sq) = bias_coefficients(consts);
    BoundCoefficients {
        c_v: c_v(consts),
        var_delta,
        var_eps,
        bias_delta,
        bias_delta_tilde,
        bias_eps,
        c_y_sq,
    }
}

/// Moments of `δ_i` for `i = 1..N-1` and of `ε_{i+1}` for `i = 1..N-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerLayerMoments {
    pub delta: Vec<MomentSummary>,
    pub eps: Vec<MomentSummary>,
}

impl PerLayerMoments {
    pub fn zeros(n_layers: usize) -> Self {
        Self {
            delta: vec![MomentSummary::ZERO; n_layers - 1],
            eps: vec![MomentSummary::ZERO; n_layers - 1],
        }
    }

    /// Closed-form moments of a plan's injected noise. With `t`, entries whose
    /// schedule is off at `t` contribute zero. Compressor entries have
    /// state-dependent moments and are rejected here.
    pub fn from_plan(chain: &Chain, plan: &PerturbationPlan, t: Option<u64>) -> Result<Self> {
        let n = chain.n_layers();
        let mut out = Self::zeros(n);
        for i in 1..n {
            for (pass, layer, slot) in [
                (PassKind::Forward, i, &mut out.delta[i - 1]),
                (PassKind::Backward, i + 1, &mut out.eps[i - 1]),
            ] {
                if let Some(e) = plan.entry(pass, layer) {
                    if e.compressor.is_some() {
                        return Err(Error::InvalidPlan(
                            "compressor moments depend on the state; estimate them from the event log".into(),
                        ));
                    }
                    if t.is_none_or(|t| e.schedule.is_active(t)) {
                        *slot = analytic_moments(
                            &e.distribution,
                            PerturbationPlan::target_dim(chain, pass, layer),
                        );
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `Σ C^e_{δi} E‖δ_i‖² + Σ C^e_{ε(i+1)} E‖ε_{i+1}‖²`.
pub fn variance_bound(coeffs: &BoundCoefficients, moments: &PerLayerMoments) -> f64 {
    let d: f64 = coeffs
        .var_delta
        .iter()
        .zip(&moments.delta)
        .map(|(c, m)| c * m.second_moment)
        .sum();
    let e: f64 = coeffs
        .var_eps
        .iter()
        .zip(&moments.eps)
        .map(|(c, m)| c * m.second_moment)
        .sum();
    d + e
}

/// `Σ C^b_{δi} ‖Eδ_i‖² + Σ C̃^b_{δi} E‖δ_i‖⁴ + Σ C^b_{ε(i+1)} ‖Eε_{i+1}‖²`.
pub fn bias_bound(coeffs: &BoundCoefficients, moments: &PerLayerMoments) -> f64 {
    let d: f64 = coeffs
        .bias_delta
        .iter()
        .zip(&coeffs.bias_delta_tilde)
        .zip(&moments.delta)
        .map(|((c, ct), m)| c * m.mean_norm_sq + ct * m.fourth_moment)
        .sum();
    let e: f64 = coeffs
        .bias_eps
        .iter()
        .zip(&moments.eps)
        .map(|(c, m)| c * m.mean_norm_sq)
        .sum();
    d + e
}

/// Per-iteration variance and bias terms `(V_t, B_t)` for `t = 0..T-1`.
pub fn per_iteration_terms(
    coeffs: &BoundCoefficients,
    chain: &Chain,
    plan: &PerturbationPlan,
    horizon: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = Vec::with_capacity(horizon as usize);
    let mut b = Vec::with_capacity(horizon as usize);
    let full = PerLayerMoments::from_plan(chain, plan, None)?;
    let (v_on, b_on) = (variance_bound(coeffs, &full), bias_bound(coeffs, &full));
    let mixed = plan
        .forward
        .values()
        .chain(plan.backward.values())
        .any(|e| !matches!(e.schedule, crate::perturbation::Schedule::EveryIteration));
    for t in 0..horizon {
        if mixed {
            let m = PerLayerMoments::from_plan(chain, plan, Some(t))?;
            v.push(variance_bound(coeffs, &m));
            b.push(bias_bound(coeffs, &m));
        } else {
            v.push(v_on);
            b.push(b_on);
        }
    }
    Ok((v, b))
}

fn check_step(consts: &SmoothnessConstants, gamma: f64) -> Result<()> {
    let limit = 1.0 / (3.0 * consts.l_loss);
    if gamma.is_nan() || gamma <= 0.0 || gamma > limit * (1.0 + 1e-12) {
        return Err(Error::StepSizeTooLarge { gamma, limit });
    }
    Ok(())
}

fn check_terms(horizon: u64, v: &[f64], b: &[f64]) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    for (name, s) in [("variance", v), ("bias", b)] {
        if s.len() as u64 != horizon {
            return Err(Error::DimensionMismatch {
                context: if name == "variance" {
                    "variance terms"
                } else {
                    "bias terms"
                },
                expected: horizon as usize,
                got: s.len(),
            });
        }
    }
    Ok(())
}

/// Bound on `(1/T) Σ_t E‖∇ℓ(w_t)‖²`:
/// `6Δ₀/(γT) + 6Lγσ² + (6Lγ/T) Σ V_t + (3/T) Σ B_t`.
pub fn nonconvex_rate_bound(
    consts: &SmoothnessConstants,
    gamma: f64,
    horizon: u64,
    delta0: f64,
    variance_terms: &[f64],
    bias_terms: &[f64],
) -> Result<f64> {
    check_step(consts, gamma)?;
    check_terms(horizon, variance_terms, bias_terms)?;
    let t = horizon as f64;
    let l = consts.l_loss;
    let sv: f64 = variance_terms.iter().sum();
    let sb: f64 = bias_terms.iter().sum();
    Ok(6.0 * delta0 / (gamma * t)
        + 6.0 * l * gamma * consts.sigma.powi(2)
        + 6.0 * l * gamma / t * sv
        + 3.0 / t * sb)
}

/// Bound on `E[ℓ(w_T) - ℓ*]`:
/// `ρ^T Δ₀ + 3Lγσ²/μ + Lγ² Σ ρ^{T-t} V_t + (γ/2) Σ ρ^{T-t} B_t`, `ρ = 1 - μγ/3`.
pub fn pl_rate_bound(
    consts: &SmoothnessConstants,
    gamma: f64,
    horizon: u64,
    delta0: f64,
    variance_terms: &[f64],
    bias_terms: &[f64],
) -> Result<f64> {
    check_step(consts, gamma)?;
    check_terms(horizon, variance_terms, bias_terms)?;
    let mu = match consts.mu {
        Some(mu) if mu > 0.0 => mu,
        _ => return Err(Error::MissingMu),
    };
    let l = consts.l_loss;
    let rho = 1.0 - mu * gamma / 3.0;
    let mut weighted_v = 0.0;
    let mut weighted_b = 0.0;
    // ρ^{T-t} accumulated from t = T-1 downwards.
    let mut w = 1.0;
    for t in (0..horizon as usize).rev() {
        w *= rho;
        weighted_v += w * variance_terms[t];
        weighted_b += w * bias_terms[t];
    }
    Ok(rho.powf(horizon as f64) * delta0
        + 3.0 * l * gamma * consts.sigma.powi(2) / mu
        + l * gamma * gamma * weighted_v
        + 0.5 * gamma * weighted_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    Nonconvex,
    Pl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelVerdict {
    pub count: f64,
    pub limit: f64,
    /// `count / limit`; admissible iff at most 1.
    pub ratio: f64,
    pub admissible: bool,
}

impl ChannelVerdict {
    fn new(count: f64, limit: f64) -> Self {
        let ratio = if limit > 0.0 {
            count / limit
        } else if count == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            count,
            limit,
            ratio,
            admissible: count <= limit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityVerdict {
    pub forward: ChannelVerdict,
    pub backward: ChannelVerdict,
}

impl AdmissibilityVerdict {
    pub fn admissible(&self) -> bool {
        self.forward.admissible && self.backward.admissible
    }
}

/// Occurrence limits `(Q_δ, Q_ε)` that keep the unperturbed rate.
pub fn occurrence_limits(
    assumption: Assumption,
    zero_mean: bool,
    horizon: u64,
    slack: f64,
) -> (f64, f64) {
    let t = horizon as f64;
    match (assumption, zero_mean) {
        (Assumption::Nonconvex, true) => (slack * t.sqrt(), slack * t),
        (Assumption::Nonconvex, false) => (slack * t.sqrt(), slack * t.sqrt()),
        (Assumption::Pl, true) => (slack, slack * t),
        (Assumption::Pl, false) => (slack, slack),
    }
}

pub fn admissibility(
    assumption: Assumption,
    zero_mean: bool,
    q_delta: u64,
    q_eps: u64,
    horizon: u64,
    slack: f64,
) -> Result<AdmissibilityVerdict> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    if slack.is_nan() || slack <= 0.0 {
        return Err(Error::InvalidConfig(
            "slack constant must be positive".into(),
        ));
    }
    let (ld, le) = occurrence_limits(assumption, zero_mean, horizon, slack);
    Ok(AdmissibilityVerdict {
        forward: ChannelVerdict::new(q_delta as f64, ld),
        backward: ChannelVerdict::new(q_eps as f64, le),
    })
}

/// Magnitude thresholds for frequent perturbations, each scaled by the slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MagnitudeThresholds {
    pub delta_norm: f64,
    pub delta_mean_norm: f64,
    pub eps_norm: f64,
    pub eps_mean_norm: f64,
}

pub fn frequent_thresholds(
    assumption: Assumption,
    horizon: u64,
    slack: f64,
) -> MagnitudeThresholds {
    let t = horizon as f64;
    match assumption {
        Assumption::Nonconvex => MagnitudeThresholds {
            delta_norm: slack * t.powf(-0.125),
            delta_mean_norm: slack * t.powf(-0.25),
            eps_norm: slack,
            eps_mean_norm: slack * t.powf(-0.25),
        },
        Assumption::Pl => {
            let lt = t.ln().max(0.0);
            MagnitudeThresholds {
                delta_norm: slack * t.powf(-0.25) * lt.powf(0.25),
                delta_mean_norm: slack * t.powf(-0.5) * lt.sqrt(),
                eps_norm: slack,
                eps_mean_norm: slack * t.powf(-0.5) * lt.sqrt(),
            }
        }
    }
}

/// Observed magnitudes: RMS norms `√E‖·‖²` and mean norms `‖E·‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MagnitudeObservation {
    pub delta_norm: f64,
    pub delta_mean_norm: f64,
    pub eps_norm: f64,
    pub eps_mean_norm: f64,
}

impl MagnitudeObservation {
    pub fn from_moments(delta: &MomentSummary, eps: &MomentSummary) -> Self {
        Self {
            delta_norm: delta.second_moment.sqrt(),
            delta_mean_norm: delta.mean_norm_sq.sqrt(),
            eps_norm: eps.second_moment.sqrt(),
            eps_mean_norm: eps.mean_norm_sq.sqrt(),
        }
    }
}

/// Per-field admissibility of frequent-perturbation magnitudes, in the order
/// `(δ, Eδ, ε, Eε)`.
pub fn check_magnitudes(
    assumption: Assumption,
    horizon: u64,
    slack: f64,
    obs: &MagnitudeObservation,
) -> [bool; 4] {
    let th = frequent_thresholds(assumption, horizon, slack);
    [
        obs.delta_norm <= th.delta_norm,
        obs.delta_mean_norm <= th.delta_mean_norm,
        obs.eps_norm <= th.eps_norm,
        obs.eps_mean_norm <= th.eps_mean_norm,
    ]
}

/// One operator evaluation point visited by a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusState {
    pub layer: usize,
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub ctx: Vec<f64>,
}

pub const MAX_CORPUS_PAIRS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalConstants {
    /// Operator constants; `l_loss`, `mu`, `sigma` are left for the caller.
    pub constants: SmoothnessConstants,
    pub corpus_size: usize,
    pub pairs_used: usize,
    /// False when the corpus had too few states for difference quotients.
    pub lipschitz_available: bool,
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    gram.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max)
        .max(0.0)
        .sqrt()
}

fn mixed_tensor(op: &dyn Operator, s: &CorpusState) -> Tensor3 {
    op.jac_mixed(&s.input, &s.weight, &s.ctx)
        .unwrap_or_else(|| {
            // Block of the joint second derivative: rows w, columns y.
            let (n, m) = (op.input_dim(), op.weight_dim());
            let h = full_hessian(op, &s.input, &s.weight, &s.ctx);
            Tensor3::from_fn(op.output_dim(), m, n, |j, a, b| h.get(j, n + a, b))
        })
}

fn distance(a: &CorpusState, b: &CorpusState) -> f64 {
    let dy: f64 = a
        .input
        .iter()
        .zip(&b.input)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let dw: f64 = a
        .weight
        .iter()
        .zip(&b.weight)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    (dy + dw).sqrt()
}

fn pair_indices(n: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= cap {
        let mut out = Vec::with_capacity(total);
        for a in 0..n {
            for b in a + 1..n {
                out.push((a, b));
            }
        }
        out
    } else {
        (0..cap)
            .map(|_| {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect()
    }
}

/// Local operator constants over a corpus of visited states: Jacobian and mixed
/// derivative norms by maxima, Lipschitz constants by difference quotients over
/// same-layer pairs (all pairs, or a uniform sample capped at `max_pairs`).
///
/// `L_f` compares `f(y, w)` and `f(y', w)`; `L_∇f` and `L_∇²f` compare the joint
/// first and second derivatives in `(y, w)` under the Frobenius norm.
pub fn estimate_constants_empirical(
    chain: &Chain,
    corpus: &[CorpusState],
    max_pairs: usize,
    seed: u64,
) -> Result<EmpiricalConstants> {
    if corpus.is_empty() {
        return Err(Error::ConstantsUnavailable("empty corpus".into()));
    }
    let n = chain.n_layers();
    let (mut c_grad, mut c_hess) = (0.0_f64, 0.0_f64);
    for s in corpus {
        if s.layer == 0 || s.layer > n {
            return Err(Error::ConstantsUnavailable(format!(
                "corpus layer {} outside chain",
                s.layer
            )));
        }
        let op = chain.op(s.layer);
        c_grad = c_grad
            .max(spectral_norm(&op.jac_input(&s.input, &s.weight, &s.ctx)))
            .max(spectral_norm(&op.jac_weight(&s.input, &s.weight, &s.ctx)));
        c_hess = c_hess.max(mixed_tensor(op, s).operator_norm());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut l_f, mut l_grad, mut l_hess) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut pairs_used = 0;
    let per_layer_cap = (max_pairs / n).max(1);
    for layer in 1..=n {
        let states: Vec<&CorpusState> = corpus.iter().filter(|s| s.layer == layer).collect();
        let op = chain.op(layer);
        for (a, b) in pair_indices(states.len(), per_layer_cap, &mut rng) {
            let (sa, sb) = (states[a], states[b]);
            pairs_used += 1;
            let dy: f64 = sa
                .input
                .iter()
                .zip(&sb.input)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            if dy > 1e-12 {
                let fa = op.forward(&sa.input, &sa.weight, &sa.ctx);
                let fb = op.forward(&sb.input, &sa.weight, &sa.ctx);
                let df: f64 = fa
                    .iter()
                    .zip(&fb)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                l_f = l_f.max(df / dy);
            }
            let dist = distance(sa, sb);
            if dist > 1e-12 {
                let ja = full_jacobian(op, &sa.input, &sa.weight, &sa.ctx);
                let jb = full_jacobian(op, &sb.input, &sb.weight, &sa.ctx);
                l_grad = l_grad.max((ja - jb).norm() / dist);
                let ha = full_hessian(op, &sa.input, &sa.weight, &sa.ctx);
                let hb = full_hessian(op, &sb.input, &sb.weight, &sa.ctx);
                l_hess = l_hess.max(ha.frobenius_distance(&hb) / dist);
            }
        }
    }
    Ok(EmpiricalConstants {
        constants: SmoothnessConstants {
            n_layers: n,
            c_grad,
            c_hess,
            l_f,
            l_grad,
            l_hess,
            l_loss: 0.0,
            mu: None,
            sigma: 0.0,
        },
        corpus_size: corpus.len(),
        pairs_used,
        lipschitz_available: pairs_used > 0,
    })
}

/// Max difference quotient `‖g(w) - g(w')‖ / ‖w - w'‖` over point pairs.
pub fn lipschitz_from_points(
    points: &[(Vec<f64>, Vec<f64>)],
    max_pairs: usize,
    seed: u64,
) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0_f64;
    for (a, b) in pair_indices(points.len(), max_pairs, &mut rng) {
        let (wa, ga) = &points[a];
        let (wb, gb) = &points[b];
        let dw: f64 = wa
            .iter()
            .zip(wb)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        if dw > 1e-12 {
            let dg: f64 = ga
                .iter()
                .zip(gb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.max(dg / dw);
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_v_examples() {
        let mut k = SmoothnessConstants::uniform(3, 2.0);
        assert_eq!(c_v(&k), 8.0);
        k.c_grad = 0.5;
        assert_eq!(c_v(&k), 1.0);
        k.c_grad = 1.0;
        assert_eq!(c_v(&k), 1.0);
    }

    #[test]
    fn unit_constants_two_layers() {
        let k = SmoothnessConstants::uniform(2, 1.0);
        let (d, e) = error_coefficients(&k);
        assert_eq!(d, vec![16.0]);
        assert_eq!(e, vec![3.0]);
        let c = coefficients(&k);
        let m = PerLayerMoments {
            delta: vec![MomentSummary {
                second_moment: 1.0,
                fourth_moment: 1.0,
                mean_norm_sq: 1.0,
            }],
            eps: vec![MomentSummary {
                second_moment: 1.0,
                fourth_moment: 1.0,
                mean_norm_sq: 1.0,
            }],
        };
        assert_eq!(variance_bound(&c, &m), 19.0);
        assert_eq!(c.bias_eps, vec![6.0]);
    }

    #[test]
    fn zero_lgrad_kills_variance_delta() {
        let mut k = SmoothnessConstants::uniform(4, 1.5);
        k.l_grad = 0.0;
        assert!(error_coefficients(&k).0.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn zero_second_order_kills_bias_delta() {
        let mut k = SmoothnessConstants::uniform(4, 1.5);
        k.l_hess = 0.0;
        k.c_hess = 0.0;
        let c = coefficients(&k);
        assert!(c
            .bias_delta
            .iter()
            .chain(&c.bias_delta_tilde)
            .chain(&c.c_y_sq)
            .all(|x| *x == 0.0));
        assert!(c.bias_eps.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn step_size_precondition() {
        let k = SmoothnessConstants::uniform(2, 1.0);
        assert!(matches!(
            nonconvex_rate_bound(&k, 0.5, 1, 1.0, &[0.0], &[0.0]),
            Err(Error::StepSizeTooLarge { .. })
        ));
        assert!(matches!(
            pl_rate_bound(&k, 0.1, 1, 1.0, &[0.0], &[0.0]),
            Err(Error::MissingMu)
        ));
    }

    #[test]
    fn clean_nonconvex_bound_is_first_term() {
        let mut k = SmoothnessConstants::uniform(2, 1.0);
        k.l_loss = 2.0;
        let g = 1.0 / 6.0;
        let b = nonconvex_rate_bound(&k, g, 10, 3.0, &[0.0; 10], &[0.0; 10]).unwrap();
        assert!((b - 6.0 * 3.0 / (g * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn table_examples() {
        let v = admissibility(Assumption::Nonconvex, true, 100, 10_000, 10_000, 1.0).unwrap();
        assert!(v.forward.admissible && v.backward.admissible);
        let v = admissibility(Assumption::Pl, true, 100, 0, 10_000, 1.0).unwrap();
        assert!(!v.forward.admissible);
        for a in [Assumption::Nonconvex, Assumption::Pl] {
            for z in [true, false] {
                assert!(admissibility(a, z, 0, 0, 7, 1.0).unwrap().admissible());
            }
        }
    }

    #[test]
    fn thresholds_shrink_with_horizon() {
        for a in [Assumption::Nonconvex, Assumption::Pl] {
            let s = frequent_thresholds(a, 100, 1.0);
            let l = frequent_thresholds(a, 100_000, 1.0);
            assert!(l.delta_norm < s.delta_norm && l.delta_mean_norm < s.delta_mean_norm);
            assert_eq!(l.eps_norm, 1.0);
        }
    }

    #[test]
    fn spectral_norm_of_row() {
        let m = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert!((spectral_norm(&m) - 5.0).abs() < 1e-12);
    }
}
