use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Operator;
use crate::error::{Error, Result};
use crate::perturbation::{PassKind, PerturbationPlan, StreamKey};

/// One data point: the chain input `y_0` and per-sample context (e.g. a label)
/// visible to every operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub ctx: Vec<f64>,
}

impl Sample {
    pub fn new(x: Vec<f64>, ctx: Vec<f64>) -> Self {
        Self { x, ctx }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    /// `‖w‖²`
    L2,
    /// `Σ w_j² / (1 + w_j²)`
    NonconvexSmooth,
}

/// `ρ·R(w)`; always evaluated exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub weight: f64,
}

impl Regularizer {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn l2(weight: f64) -> Self {
        Self {
            kind: RegularizerKind::L2,
            weight,
        }
    }

    pub fn nonconvex(weight: f64) -> Self {
        Self {
            kind: RegularizerKind::NonconvexSmooth,
            weight,
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let r: f64 = match self.kind {
            RegularizerKind::None => return 0.0,
            RegularizerKind::L2 => w.iter().map(|x| x * x).sum(),
            RegularizerKind::NonconvexSmooth => w.iter().map(|x| x * x / (1.0 + x * x)).sum(),
        };
        self.weight * r
    }

    /// Adds `ρ∇R(w)` into `out`.
    pub fn add_gradient(&self, w: &[f64], out: &mut [f64]) {
        match self.kind {
            RegularizerKind::None => {}
            RegularizerKind::L2 => {
                for (o, x) in out.iter_mut().zip(w) {
                    *o += self.weight * 2.0 * x;
                }
            }
            RegularizerKind::NonconvexSmooth => {
                for (o, x) in out.iter_mut().zip(w) {
                    let d = 1.0 + x * x;
                    *o += self.weight * 2.0 * x / (d * d);
                }
            }
        }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.add_gradient(w, &mut out);
        out
    }

    /// Strong-convexity modulus of `ρR`, when it has one.
    pub fn strong_convexity(&self) -> Option<f64> {
        match self.kind {
            RegularizerKind::L2 if self.weight > 0.0 => Some(2.0 * self.weight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Empty,
    Forward,
    Backward,
    Gradients,
}

/// Buffers for one execution of the passes. Reused across samples and
/// iterations; index `i` refers to layer `i` (1-based), index 0 is `y_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PassState {
    pub outputs: Vec<Vec<f64>>,
    /// `adjoints[i] = v_i` for `i = 1..=N`; `adjoints[0]` is unused and empty.
    pub adjoints: Vec<Vec<f64>>,
    /// Stacked `(u_1, …, u_N)`.
    pub weight_grads: Vec<f64>,
    /// `delta[i] = δ_i` for `i = 1..=N`.
    pub delta: Vec<Vec<f64>>,
    /// `eps[i] = ε_i` for `i = 2..=N`; it has the dimension of `v_{i-1}`.
    pub eps: Vec<Vec<f64>>,
    pub delta_active: Vec<bool>,
    pub eps_active: Vec<bool>,
    /// False for clean passes, in which case the perturbation log is all zero.
    pub perturbed: bool,
    pub stage: Stage,
}

impl PassState {
    pub fn new(chain: &Chain) -> Self {
        let n = chain.n_layers();
        let mut outputs = vec![vec![0.0; chain.input_dim()]];
        let mut adjoints = vec![Vec::new()];
        let mut delta = vec![Vec::new()];
        let mut eps = vec![Vec::new(), Vec::new()];
        for (i, op) in chain.ops.iter().enumerate() {
            outputs.push(vec![0.0; op.output_dim()]);
            adjoints.push(vec![0.0; op.output_dim()]);
            delta.push(vec![0.0; op.output_dim()]);
            if i >= 1 {
                eps.push(vec![0.0; op.input_dim()]);
            }
        }
        Self {
            outputs,
            adjoints,
            weight_grads: vec![0.0; chain.weight_dim()],
            delta,
            eps,
            delta_active: vec![false; n + 1],
            eps_active: vec![false; n + 1],
            perturbed: false,
            stage: Stage::Empty,
        }
    }

    pub fn loss(&self) -> f64 {
        self.outputs.last().map(|y| y[0]).unwrap_or(f64::NAN)
    }

    pub fn any_delta(&self) -> bool {
        self.delta_active.iter().any(|a| *a)
    }

    pub fn any_eps(&self) -> bool {
        self.eps_active.iter().any(|a| *a)
    }

    pub fn delta_sq(&self) -> f64 {
        self.delta.iter().flatten().map(|x| x * x).sum()
    }

    pub fn eps_sq(&self) -> f64 {
        self.eps.iter().flatten().map(|x| x * x).sum()
    }

    fn clear_log(&mut self) {
        for d in self.delta.iter_mut().chain(self.eps.iter_mut()) {
            d.fill(0.0);
        }
        self.delta_active.fill(false);
        self.eps_active.fill(false);
    }
}

/// Composite objective `F(x; w) = y_N`, `y_i = f_i(y_{i-1}, w_i)`, plus `ρR(w)`.
#[derive(Debug, Clone)]
pub struct Chain {
    ops: Vec<Arc<dyn Operator>>,
    regularizer: Regularizer,
    offsets: Vec<usize>,
}

impl Chain {
    pub fn new(ops: Vec<Arc<dyn Operator>>, regularizer: Regularizer) -> Result<Self> {
        if ops.len() < 2 {
            return Err(Error::InvalidChain(format!(
                "need at least 2 operators, got {}",
                ops.len()
            )));
        }
        for (i, pair) in ops.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidChain(format!(
                    "operator {} emits {} values but operator {} expects {}",
                    i + 1,
                    pair[0].output_dim(),
                    i + 2,
                    pair[1].input_dim()
                )));
            }
        }
        let last = ops.last().map(|o| o.output_dim()).unwrap_or(0);
        if last != 1 {
            return Err(Error::InvalidChain(format!(
                "final operator must be scalar, emits {last}"
            )));
        }
        let mut offsets = vec![0];
        for op in &ops {
            offsets.push(offsets.last().unwrap() + op.weight_dim());
        }
        Ok(Self {
            ops,
            regularizer,
            offsets,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.ops.len()
    }

    /// Layer `i` is 1-based.
    pub fn op(&self, i: usize) -> &dyn Operator {
        self.ops[i - 1].as_ref()
    }

    pub fn ops(&self) -> &[Arc<dyn Operator>] {
        &self.ops
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.regularizer
    }

    pub fn input_dim(&self) -> usize {
        self.ops[0].input_dim()
    }

    pub fn weight_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn weight_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i - 1]..self.offsets[i]
    }

    pub fn layer_weights<'a>(&self, w: &'a [f64], i: usize) -> &'a [f64] {
        &w[self.weight_range(i)]
    }

    fn check_dims(&self, sample: &Sample, w: &[f64]) -> Result<()> {
        if sample.x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "chain input",
                expected: self.input_dim(),
                got: sample.x.len(),
            });
        }
        if w.len() != self.weight_dim() {
            return Err(Error::DimensionMismatch {
                context: "chain weights",
                expected: self.weight_dim(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Forward pass; with a plan, `δ_i` is added after each operator.
    pub fn forward(
        &self,
        sample: &Sample,
        w: &[f64],
        perturb: Option<(&PerturbationPlan, StreamKey)>,
        state: &mut PassState,
    ) -> Result<()> {
        self.check_dims(sample, w)?;
        state.clear_log();
        state.perturbed = perturb.is_some();
        state.outputs[0].copy_from_slice(&sample.x);
        for i in 1..=self.n_layers() {
            let (prev, rest) = state.outputs.split_at_mut(i);
            let out = &mut rest[0];
            self.ops[i - 1].forward_into(&prev[i - 1], self.layer_weights(w, i), &sample.ctx, out);
            if let Some((plan, key)) = perturb {
                state.delta_active[i] =
                    plan.perturb(PassKind::Forward, i, key, out, &mut state.delta[i]);
            }
            if out.iter().any(|x| !x.is_finite()) {
                state.stage = Stage::Empty;
                return Err(Error::NonFinite("forward pass"));
            }
        }
        state.stage = Stage::Forward;
        Ok(())
    }

    /// Adjoint recursion from `v_N = 1`; with a plan, `ε_i` is added to
    /// `v_{i-1}` for `i = N..2`. Uses whatever outputs the forward pass stored.
    pub fn backward(
        &self,
        sample: &Sample,
        w: &[f64],
        perturb: Option<(&PerturbationPlan, StreamKey)>,
        state: &mut PassState,
    ) -> Result<()> {
        if state.stage < Stage::Forward {
            return Err(Error::MissingState("backward pass needs forward outputs"));
        }
        let n = self.n_layers();
        state.adjoints[n][0] = 1.0;
        for i in (2..=n).rev() {
            let (lo, hi) = state.adjoints.split_at_mut(i);
            let out = &mut lo[i - 1];
            self.ops[i - 1].vjp_input(
                &state.outputs[i - 1],
                self.layer_weights(w, i),
                &sample.ctx,
                &hi[0],
                out,
            );
            if let Some((plan, key)) = perturb {
                state.eps_active[i] =
                    plan.perturb(PassKind::Backward, i, key, out, &mut state.eps[i]);
            }
            if out.iter().any(|x| !x.is_finite()) {
                state.stage = Stage::Forward;
                return Err(Error::NonFinite("backward pass"));
            }
        }
        state.stage = Stage::Backward;
        Ok(())
    }

    /// `u_i = ∇₂f_i(y_{i-1}, w_i)ᵀ v_i`, no added noise.
    pub fn weight_gradients(
        &self,
        sample: &Sample,
        w: &[f64],
        state: &mut PassState,
    ) -> Result<()> {
        if state.stage < Stage::Backward {
            return Err(Error::MissingState("weight gradients need adjoints"));
        }
        for i in 1..=self.n_layers() {
            let r = self.weight_range(i);
            self.ops[i - 1].vjp_weight(
                &state.outputs[i - 1],
                &w[r.clone()],
                &sample.ctx,
                &state.adjoints[i],
                &mut state.weight_grads[r],
            );
        }
        if state.weight_grads.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weight gradients"));
        }
        state.stage = Stage::Gradients;
        Ok(())
    }

    pub fn forward_clean(&self, sample: &Sample, w: &[f64], state: &mut PassState) -> Result<()> {
        self.forward(sample, w, None, state)
    }

    pub fn backward_clean(&self, sample: &Sample, w: &[f64], state: &mut PassState) -> Result<()> {
        self.backward(sample, w, None, state)
    }

    pub fn forward_perturbed(
        &self,
        sample: &Sample,
        w: &[f64],
        plan: &PerturbationPlan,
        key: StreamKey,
        state: &mut PassState,
    ) -> Result<()> {
        self.forward(sample, w, Some((plan, key)), state)
    }

    pub fn backward_perturbed(
        &self,
        sample: &Sample,
        w: &[f64],
        plan: &PerturbationPlan,
        key: StreamKey,
        state: &mut PassState,
    ) -> Result<()> {
        self.backward(sample, w, Some((plan, key)), state)
    }

    /// All three passes; the stacked `u` (without `r`) is left in `state`.
    pub fn gradient(
        &self,
        sample: &Sample,
        w: &[f64],
        perturb: Option<(&PerturbationPlan, StreamKey)>,
        state: &mut PassState,
    ) -> Result<()> {
        self.forward(sample, w, perturb, state)?;
        self.backward(sample, w, perturb, state)?;
        self.weight_gradients(sample, w, state)
    }

    pub fn regularizer_gradient(&self, w: &[f64]) -> Vec<f64> {
        self.regularizer.gradient(w)
    }

    /// `F(x; w) + ρR(w)` with a clean pass.
    pub fn sample_loss(&self, sample: &Sample, w: &[f64], state: &mut PassState) -> Result<f64> {
        self.forward(sample, w, None, state)?;
        Ok(state.loss() + self.regularizer.value(w))
    }
}
