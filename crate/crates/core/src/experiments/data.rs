use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{
    sigmoid, Chain, LogisticLink, Regularizer, RegularizerKind, Sample, Softplus,
};
use crate::optimizer::full_objective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub dim: usize,
    pub samples: usize,
    pub regularizer: RegularizerKind,
    pub rho: f64,
    pub seed: u64,
    /// Forces the ground-truth vector to zero, so every label is a fair coin.
    pub zero_truth: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            samples: 500,
            regularizer: RegularizerKind::NonconvexSmooth,
            rho: 0.001,
            seed: 0,
            zero_truth: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig(
                "dataset needs dim >= 1 and samples >= 1".into(),
            ));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig("rho must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn regularizer(&self) -> Regularizer {
        Regularizer {
            kind: self.regularizer,
            weight: self.rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegData {
    pub truth: Vec<f64>,
    /// `x = h`, `ctx = [y]` with `y ∈ {+1, −1}`.
    pub samples: Vec<Sample>,
}

/// `x* ~ N(0, I)`, `h_l ~ N(0, I)`, `z_l ~ U(0, 1)`, and `y_l = +1` iff
/// `z_l ≤ σ(h_lᵀx*)`.
pub fn generate_logreg_data(spec: &DatasetSpec) -> Result<LogRegData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let truth: Vec<f64> = (0..spec.dim)
        .map(|_| {
            let v = normal(&mut rng);
            if spec.zero_truth {
                0.0
            } else {
                v
            }
        })
        .collect();
    let samples = (0..spec.samples)
        .map(|_| {
            let h: Vec<f64> = (0..spec.dim).map(|_| normal(&mut rng)).collect();
            let z: f64 = rng.random();
            let s: f64 = h.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let y = if z <= sigmoid(s) { 1.0 } else { -1.0 };
            Sample::new(h, vec![y])
        })
        .collect();
    Ok(LogRegData { truth, samples })
}

/// `f₁ = −y hᵀw`, `f₂ = softplus`.
pub fn logistic_chain(dim: usize, regularizer: Regularizer) -> Chain {
    Chain::new(
        vec![Arc::new(LogisticLink::new(dim)), Arc::new(Softplus)],
        regularizer,
    )
    .expect("logistic chain is well formed")
}

/// A chain together with the data it is trained on.
#[derive(Debug, Clone)]
pub struct Problem {
    pub chain: Chain,
    pub samples: Vec<Sample>,
}

impl Problem {
    pub fn new(chain: Chain, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig(
                "problem needs at least one sample".into(),
            ));
        }
        for s in &samples {
            if s.x.len() != chain.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "problem sample",
                    expected: chain.input_dim(),
                    got: s.x.len(),
                });
            }
        }
        Ok(Self { chain, samples })
    }

    pub fn logistic(spec: &DatasetSpec) -> Result<Self> {
        let data = generate_logreg_data(spec)?;
        Self::new(logistic_chain(spec.dim, spec.regularizer()), data.samples)
    }

    pub fn objective(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        full_objective(&self.chain, &self.samples, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimumReport {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clean full-batch gradient descent with a backtracking step until
/// `‖∇ℓ‖ < tol` or `max_iter` steps.
pub fn stationary_point(
    problem: &Problem,
    w0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<OptimumReport> {
    let mut w = w0.to_vec();
    let (mut f, mut g) = problem.objective(&w)?;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut trial = vec![0.0; w.len()];
    while norm(&g) >= tol && iterations < max_iter {
        let gg: f64 = g.iter().map(|x| x * x).sum();
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..w.len() {
                trial[k] = w[k] - step * g[k];
            }
            let (ft, gt) = problem.objective(&trial)?;
            // Near the optimum loss differences drown in rounding, so a step that
            // shrinks the gradient without raising the loss is also accepted.
            let armijo = ft <= f - 1e-4 * step * gg;
            let flat = ft <= f + 1e-14 * f.abs().max(1.0) && norm(&gt) < norm(&g);
            if armijo || flat {
                w.copy_from_slice(&trial);
                f = ft;
                g = gt;
                step *= 1.25;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(OptimumReport {
        loss: f,
        grad_norm: norm(&g),
        weights: w,
        iterations,
    })
}

/// `ℓ*` for strongly convex problems (L2 regularizer with `ρ > 0`).
pub fn loss_star_oracle(problem: &Problem, tol: f64) -> Result<OptimumReport> {
    if problem.chain.regularizer().strong_convexity().is_none() {
        return Err(Error::OptimumUnavailable(
            "the optimum is only certified for an L2 regularizer with positive weight".into(),
        ));
    }
    let w0 = vec![0.0; problem.chain.weight_dim()];
    stationary_point(problem, &w0, tol, 100_000)
}
