use nalgebra::DMatrix;

use super::Operator;
use crate::tensor::Tensor3;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference step for a coordinate, scaled by its magnitude.
#[inline]
pub fn fd_step(base: f64, coord: f64) -> f64 {
    base * (1.0 + coord.abs())
}

/// Max relative error of each derivative block against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianReport {
    pub input: f64,
    pub weight: f64,
    /// `None` when the operator has no analytic mixed derivative.
    pub mixed: Option<f64>,
}

impl JacobianReport {
    pub fn max_error(&self) -> f64 {
        self.input.max(self.weight).max(self.mixed.unwrap_or(0.0))
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0_f64;
    let mut scale = 0.0_f64;
    for (a, b) in analytic.iter().zip(numeric) {
        diff = diff.max((a - b).abs());
        scale = scale.max(a.abs()).max(b.abs());
    }
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn perturbed(v: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    out[k] += h;
    out
}

fn fd_jac_input(op: &dyn Operator, y: &[f64], w: &[f64], ctx: &[f64], base: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(op.output_dim(), op.input_dim());
    for k in 0..op.input_dim() {
        let h = fd_step(base, y[k]);
        let fp = op.forward(&perturbed(y, k, h), w, ctx);
        let fm = op.forward(&perturbed(y, k, -h), w, ctx);
        for j in 0..op.output_dim() {
            jac[(j, k)] = (fp[j] - fm[j]) / (2.0 * h);
        }
    }
    jac
}

fn fd_jac_weight(op: &dyn Operator, y: &[f64], w: &[f64], ctx: &[f64], base: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(op.output_dim(), op.weight_dim());
    for k in 0..op.weight_dim() {
        let h = fd_step(base, w[k]);
        let fp = op.forward(y, &perturbed(w, k, h), ctx);
        let fm = op.forward(y, &perturbed(w, k, -h), ctx);
        for j in 0..op.output_dim() {
            jac[(j, k)] = (fp[j] - fm[j]) / (2.0 * h);
        }
    }
    jac
}

/// Numerical `∂(∇₂f)/∂y` from the analytic weight Jacobian.
fn fd_mixed(op: &dyn Operator, y: &[f64], w: &[f64], ctx: &[f64], base: f64) -> Tensor3 {
    let (p, m, n) = (op.output_dim(), op.weight_dim(), op.input_dim());
    let mut t = Tensor3::zeros(p, m, n);
    for b in 0..n {
        let h = fd_step(base, y[b]);
        let jp = op.jac_weight(&perturbed(y, b, h), w, ctx);
        let jm = op.jac_weight(&perturbed(y, b, -h), w, ctx);
        for j in 0..p {
            for a in 0..m {
                t.set(j, a, b, (jp[(j, a)] - jm[(j, a)]) / (2.0 * h));
            }
        }
    }
    t
}

/// Compares analytic derivatives with central differences of `forward` (and of
/// `jac_weight` for the mixed block).
pub fn check_jacobians(
    op: &dyn Operator,
    y: &[f64],
    w: &[f64],
    ctx: &[f64],
    base_step: f64,
) -> JacobianReport {
    let ji = op.jac_input(y, w, ctx);
    let jw = op.jac_weight(y, w, ctx);
    let input = rel_error(
        ji.as_slice(),
        fd_jac_input(op, y, w, ctx, base_step).as_slice(),
    );
    let weight = rel_error(
        jw.as_slice(),
        fd_jac_weight(op, y, w, ctx, base_step).as_slice(),
    );
    let mixed = op.jac_mixed(y, w, ctx).map(|m| {
        let num = fd_mixed(op, y, w, ctx, base_step);
        rel_error(m.as_slice(), num.as_slice())
    });
    JacobianReport {
        input,
        weight,
        mixed,
    }
}

/// Joint Jacobian `[∇₁f | ∇₂f]`, shape `d_out × (d_in + d_w)`.
pub fn full_jacobian(op: &dyn Operator, y: &[f64], w: &[f64], ctx: &[f64]) -> DMatrix<f64> {
    let (p, n, m) = (op.output_dim(), op.input_dim(), op.weight_dim());
    let ji = op.jac_input(y, w, ctx);
    let jw = op.jac_weight(y, w, ctx);
    let mut out = DMatrix::zeros(p, n + m);
    out.view_mut((0, 0), (p, n)).copy_from(&ji);
    out.view_mut((0, n), (p, m)).copy_from(&jw);
    out
}

/// Joint second derivative in `(y, w)`, dims `(d_out, d_in + d_w, d_in + d_w)`,
/// from central differences of the analytic joint Jacobian.
pub fn full_hessian(op: &dyn Operator, y: &[f64], w: &[f64], ctx: &[f64]) -> Tensor3 {
    let (p, n, m) = (op.output_dim(), op.input_dim(), op.weight_dim());
    let q = n + m;
    let mut t = Tensor3::zeros(p, q, q);
    for b in 0..q {
        let (jp, jm, h) = if b < n {
            let h = fd_step(DEFAULT_FD_STEP, y[b]);
            (
                full_jacobian(op, &perturbed(y, b, h), w, ctx),
                full_jacobian(op, &perturbed(y, b, -h), w, ctx),
                h,
            )
        } else {
            let k = b - n;
            let h = fd_step(DEFAULT_FD_STEP, w[k]);
            (
                full_jacobian(op, y, &perturbed(w, k, h), ctx),
                full_jacobian(op, y, &perturbed(w, k, -h), ctx),
                h,
            )
        };
        for j in 0..p {
            for a in 0..q {
                t.set(j, a, b, (jp[(j, a)] - jm[(j, a)]) / (2.0 * h));
            }
        }
    }
    t
}
