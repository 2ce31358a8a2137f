//! Chain components `y_i = f_i(y_{i-1}, w_i)` and the built-in catalog.
//!
//! Operators are evaluated through vector-Jacobian products so that a pass never
//! materializes a Jacobian; explicit Jacobians are derived from the products and
//! used for checks and constant estimation.

mod chain;
mod check;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub use chain::{Chain, PassState, Regularizer, RegularizerKind, Sample, Stage};
pub use check::{
    check_jacobians, fd_step, full_hessian, full_jacobian, JacobianReport, DEFAULT_FD_STEP,
};

pub trait Operator: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn weight_dim(&self) -> usize;

    fn forward_into(&self, y: &[f64], w: &[f64], ctx: &[f64], out: &mut [f64]);

    /// `out = ∇₁f(y, w)ᵀ v`.
    fn vjp_input(&self, y: &[f64], w: &[f64], ctx: &[f64], v: &[f64], out: &mut [f64]);

    /// `out = ∇₂f(y, w)ᵀ v`.
    fn vjp_weight(&self, y: &[f64], w: &[f64], ctx: &[f64], v: &[f64], out: &mut [f64]);

    fn forward(&self, y: &[f64], w: &[f64], ctx: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(y, w, ctx, &mut out);
        out
    }

    /// `∇₁f`, shape `d_out × d_in`.
    fn jac_input(&self, y: &[f64], w: &[f64], ctx: &[f64]) -> DMatrix<f64> {
        let (p, n) = (self.output_dim(), self.input_dim());
        let mut jac = DMatrix::zeros(p, n);
        let mut e = vec![0.0; p];
        let mut row = vec![0.0; n];
        for j in 0..p {
            e[j] = 1.0;
            self.vjp_input(y, w, ctx, &e, &mut row);
            for (k, r) in row.iter().enumerate() {
                jac[(j, k)] = *r;
            }
            e[j] = 0.0;
        }
        jac
    }

    /// `∇₂f`, shape `d_out × d_w`.
    fn jac_weight(&self, y: &[f64], w: &[f64], ctx: &[f64]) -> DMatrix<f64> {
        let (p, n) = (self.output_dim(), self.weight_dim());
        let mut jac = DMatrix::zeros(p, n);
        let mut e = vec![0.0; p];
        let mut row = vec![0.0; n];
        for j in 0..p {
            e[j] = 1.0;
            self.vjp_weight(y, w, ctx, &e, &mut row);
            for (k, r) in row.iter().enumerate() {
                jac[(j, k)] = *r;
            }
            e[j] = 0.0;
        }
        jac
    }

    /// Mixed derivative `∇²₂₁f` with dims `(d_out, d_w, d_in)`:
    /// entry `(j, a, b)` is `∂²f_j / ∂w_a ∂y_b`.
    fn jac_mixed(&self, _y: &[f64], _w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        None
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ'(x)`, written in `|x|` so that `σ'(a) == σ'(-a)` holds bit-for-bit.
#[inline]
pub fn sigmoid_prime(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

#[inline]
pub fn sigmoid_second(x: f64) -> f64 {
    sigmoid_prime(x) * (1.0 - 2.0 * sigmoid(x))
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `f(x, w) = A (x ⊙ w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineElementwise {
    a: DMatrix<f64>,
}

impl AffineElementwise {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl Operator for AffineElementwise {
    fn name(&self) -> &'static str {
        "affine_elementwise"
    }
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }
    fn output_dim(&self) -> usize {
        self.a.nrows()
    }
    fn weight_dim(&self) -> usize {
        self.a.ncols()
    }
    fn forward_into(&self, y: &[f64], w: &[f64], _ctx: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..self.a.ncols() {
                acc += self.a[(j, k)] * y[k] * w[k];
            }
            *o = acc;
        }
    }
    fn vjp_input(&self, _y: &[f64], w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, vj) in v.iter().enumerate() {
                acc += self.a[(j, k)] * vj;
            }
            *o = acc * w[k];
        }
    }
    fn vjp_weight(&self, y: &[f64], _w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, vj) in v.iter().enumerate() {
                acc += self.a[(j, k)] * vj;
            }
            *o = acc * y[k];
        }
    }
    fn jac_mixed(&self, _y: &[f64], _w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        let n = self.a.ncols();
        Some(Tensor3::from_fn(self.a.nrows(), n, n, |j, a, b| {
            if a == b {
                self.a[(j, a)]
            } else {
                0.0
            }
        }))
    }
}

/// `f(h, w) = -y hᵀw`, with the label `y = ctx[0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticLink {
    dim: usize,
}

impl LogisticLink {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Operator for LogisticLink {
    fn name(&self) -> &'static str {
        "logistic_link"
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn weight_dim(&self) -> usize {
        self.dim
    }
    fn forward_into(&self, y: &[f64], w: &[f64], ctx: &[f64], out: &mut [f64]) {
        let dot: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
        out[0] = -ctx[0] * dot;
    }
    fn vjp_input(&self, _y: &[f64], w: &[f64], ctx: &[f64], v: &[f64], out: &mut [f64]) {
        let s = -ctx[0] * v[0];
        for (o, wk) in out.iter_mut().zip(w) {
            *o = s * wk;
        }
    }
    fn vjp_weight(&self, y: &[f64], _w: &[f64], ctx: &[f64], v: &[f64], out: &mut [f64]) {
        let s = -ctx[0] * v[0];
        for (o, yk) in out.iter_mut().zip(y) {
            *o = s * yk;
        }
    }
    fn jac_mixed(&self, _y: &[f64], _w: &[f64], ctx: &[f64]) -> Option<Tensor3> {
        let label = ctx[0];
        Some(Tensor3::from_fn(1, self.dim, self.dim, |_, a, b| {
            if a == b {
                -label
            } else {
                0.0
            }
        }))
    }
}

/// `f(z) = ln(1 + e^z)`; weightless.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Softplus;

impl Operator for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn weight_dim(&self) -> usize {
        0
    }
    fn forward_into(&self, y: &[f64], _w: &[f64], _ctx: &[f64], out: &mut [f64]) {
        out[0] = softplus(y[0]);
    }
    fn vjp_input(&self, y: &[f64], _w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = sigmoid(y[0]) * v[0];
    }
    fn vjp_weight(&self, _y: &[f64], _w: &[f64], _ctx: &[f64], _v: &[f64], _out: &mut [f64]) {}
    fn jac_mixed(&self, _y: &[f64], _w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        Some(Tensor3::zeros(1, 0, 1))
    }
}

/// `f(y, w) = ⟨y, w⟩² + ½‖y‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerProductSquare {
    dim: usize,
}

impl InnerProductSquare {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Operator for InnerProductSquare {
    fn name(&self) -> &'static str {
        "inner_product_square"
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn weight_dim(&self) -> usize {
        self.dim
    }
    fn forward_into(&self, y: &[f64], w: &[f64], _ctx: &[f64], out: &mut [f64]) {
        let s: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
        let nn: f64 = y.iter().map(|a| a * a).sum();
        out[0] = s * s + 0.5 * nn;
    }
    fn vjp_input(&self, y: &[f64], w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        let s: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
        for k in 0..self.dim {
            out[k] = v[0] * (2.0 * s * w[k] + y[k]);
        }
    }
    fn vjp_weight(&self, y: &[f64], w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        let s: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
        for k in 0..self.dim {
            out[k] = v[0] * 2.0 * s * y[k];
        }
    }
    fn jac_mixed(&self, y: &[f64], w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        let s: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
        Some(Tensor3::from_fn(1, self.dim, self.dim, |_, a, b| {
            2.0 * (y[a] * w[b] + if a == b { s } else { 0.0 })
        }))
    }
}

/// `f(y, b) = σ(y + b)` on scalars.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SigmoidShift;

impl Operator for SigmoidShift {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn weight_dim(&self) -> usize {
        1
    }
    fn forward_into(&self, y: &[f64], w: &[f64], _ctx: &[f64], out: &mut [f64]) {
        out[0] = sigmoid(y[0] + w[0]);
    }
    fn vjp_input(&self, y: &[f64], w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = sigmoid_prime(y[0] + w[0]) * v[0];
    }
    fn vjp_weight(&self, y: &[f64], w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = sigmoid_prime(y[0] + w[0]) * v[0];
    }
    fn jac_mixed(&self, y: &[f64], w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        Some(Tensor3::from_fn(1, 1, 1, |_, _, _| {
            sigmoid_second(y[0] + w[0])
        }))
    }
}

/// `f(x) = x²` on scalars; weightless.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScalarQuadratic;

impl Operator for ScalarQuadratic {
    fn name(&self) -> &'static str {
        "scalar_quadratic"
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn weight_dim(&self) -> usize {
        0
    }
    fn forward_into(&self, y: &[f64], _w: &[f64], _ctx: &[f64], out: &mut [f64]) {
        out[0] = y[0] * y[0];
    }
    fn vjp_input(&self, y: &[f64], _w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * y[0] * v[0];
    }
    fn vjp_weight(&self, _y: &[f64], _w: &[f64], _ctx: &[f64], _v: &[f64], _out: &mut [f64]) {}
    fn jac_mixed(&self, _y: &[f64], _w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        Some(Tensor3::zeros(1, 0, 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identity {
    dim: usize,
}

impl Identity {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Operator for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn weight_dim(&self) -> usize {
        0
    }
    fn forward_into(&self, y: &[f64], _w: &[f64], _ctx: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
    fn vjp_input(&self, _y: &[f64], _w: &[f64], _ctx: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
    }
    fn vjp_weight(&self, _y: &[f64], _w: &[f64], _ctx: &[f64], _v: &[f64], _out: &mut [f64]) {}
    fn jac_mixed(&self, _y: &[f64], _w: &[f64], _ctx: &[f64]) -> Option<Tensor3> {
        Some(Tensor3::zeros(self.dim, 0, self.dim))
    }
}

/// Serializable description of a catalog operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    /// `rows` is the matrix `A` in row-major nested form.
    AffineElementwise {
        rows: Vec<Vec<f64>>,
    },
    LogisticLink {
        dim: usize,
    },
    Softplus,
    InnerProductSquare {
        dim: usize,
    },
    Sigmoid,
    ScalarQuadratic,
    Identity {
        dim: usize,
    },
}

impl OperatorSpec {
    pub fn build(&self) -> Result<Arc<dyn Operator>> {
        Ok(match self {
            OperatorSpec::AffineElementwise { rows } => {
                let p = rows.len();
                let n = rows.first().map(|r| r.len()).unwrap_or(0);
                if p == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidChain(
                        "affine matrix must be a nonempty rectangle".into(),
                    ));
                }
                let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
                Arc::new(AffineElementwise::new(DMatrix::from_row_slice(p, n, &flat)))
            }
            OperatorSpec::LogisticLink { dim } => Arc::new(LogisticLink::new(*dim)),
            OperatorSpec::Softplus => Arc::new(Softplus),
            OperatorSpec::InnerProductSquare { dim } => Arc::new(InnerProductSquare::new(*dim)),
            OperatorSpec::Sigmoid => Arc::new(SigmoidShift),
            OperatorSpec::ScalarQuadratic => Arc::new(ScalarQuadratic),
            OperatorSpec::Identity { dim } => Arc::new(Identity::new(*dim)),
        })
    }
}

/// One instance of every catalog operator, at small fixed dimensions.
pub fn catalog() -> Vec<Arc<dyn Operator>> {
    vec![
        Arc::new(AffineElementwise::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.5, -0.5, 0.25, 2.0, -1.0, 0.75],
        ))),
        Arc::new(LogisticLink::new(4)),
        Arc::new(Softplus),
        Arc::new(InnerProductSquare::new(3)),
        Arc::new(SigmoidShift),
        Arc::new(ScalarQuadratic),
        Arc::new(Identity::new(3)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub operator: &'static str,
    pub point: usize,
    pub input_error: f64,
    pub weight_error: f64,
    pub mixed_error: Option<f64>,
    pub max_error: f64,
}

/// Finite-difference checks of every catalog operator at `points` standard
/// normal `(y, w)` draws; `ctx` is a random label in `{+1, −1}`.
pub fn gradcheck_catalog(points: usize, seed: u64) -> Vec<GradcheckRow> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for op in catalog() {
        for point in 0..points {
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| rng.sample(rand_distr::StandardNormal))
                    .collect()
            };
            let y = draw(op.input_dim());
            let w = draw(op.weight_dim());
            let ctx = vec![if rng.random::<bool>() { 1.0 } else { -1.0 }];
            let r = check_jacobians(op.as_ref(), &y, &w, &ctx, DEFAULT_FD_STEP);
            rows.push(GradcheckRow {
                operator: op.name(),
                point,
                input_error: r.input,
                weight_error: r.weight,
                mixed_error: r.mixed,
                max_error: r.max_error(),
            });
        }
    }
    rows
}
