//! C ABI over the `chainsgd` library.
//!
//! Every function returns a [`ChainsgdStatus`]; on failure a message is kept
//! per thread and read with [`chainsgd_last_error`]. Handles are opaque and
//! released with their `_free` function. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use chainsgd::bounds::{self, Assumption, BoundCoefficients, SmoothnessConstants};
use chainsgd::experiments::{self, DatasetSpec, Problem, Regime, Top1Params};
use chainsgd::operator::RegularizerKind;
use chainsgd::optimizer::{self, RunConfig, RunTrace};
use chainsgd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainsgdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    StepSizeTooLarge = 3,
    Unavailable = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainsgdRegularizer {
    None = 0,
    L2 = 1,
    NonconvexSmooth = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainsgdRegime {
    FrequentZeroMean = 0,
    FrequentBiasedBackward = 1,
    IntermittentForward = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainsgdAssumption {
    Nonconvex = 0,
    Pl = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainsgdCoefficient {
    VarDelta = 0,
    VarEps = 1,
    BiasDelta = 2,
    BiasDeltaTilde = 3,
    BiasEps = 4,
}

/// Opaque: a chain plus its data.
pub struct ChainsgdProblem {
    inner: Problem,
}

/// Opaque: a finished run.
pub struct ChainsgdTrace {
    inner: RunTrace,
}

/// Opaque: coefficient vectors for one set of constants.
pub struct ChainsgdCoefficients {
    inner: BoundCoefficients,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdConstants {
    pub n_layers: usize,
    pub c_grad: f64,
    pub c_hess: f64,
    pub l_f: f64,
    pub l_grad: f64,
    pub l_hess: f64,
    pub l_loss: f64,
    /// Nonpositive means "not strongly convex".
    pub mu: f64,
    pub sigma: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdGdBias {
    pub final_iterate: f64,
    pub fixed_point: f64,
    pub gap: f64,
    pub contraction_factor: f64,
    pub contracting: bool,
    pub diverged: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdTop1Params {
    /// Row-major 2×2 matrix.
    pub a: [f64; 4],
    pub s: f64,
    pub gamma: f64,
    pub beta: f64,
    pub horizon: u64,
    pub threshold: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdTop1Verdict {
    pub clean_final_norm: f64,
    pub compressed_min_norm: f64,
    pub compressed_diverged: bool,
    pub clean_converged: bool,
    pub compressed_stalls: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdSigmoidBias {
    pub bias: f64,
    pub mc_bias: f64,
    pub mc_std_error: f64,
    pub mc_agrees: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdChannel {
    pub count: f64,
    pub limit: f64,
    pub ratio: f64,
    pub admissible: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainsgdAdmissibility {
    pub forward: ChainsgdChannel,
    pub backward: ChainsgdChannel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ChainsgdStatus {
    match e {
        Error::StepSizeTooLarge { .. } => ChainsgdStatus::StepSizeTooLarge,
        Error::MissingMu
        | Error::ConstantsUnavailable(_)
        | Error::OptimumUnavailable(_)
        | Error::MissingState(_) => ChainsgdStatus::Unavailable,
        Error::NonFinite(_) => ChainsgdStatus::Numerical,
        Error::Io(_) => ChainsgdStatus::Io,
        _ => ChainsgdStatus::InvalidArgument,
    }
}

fn guard<F: FnOnce() -> Result<(), (ChainsgdStatus, String)>>(f: F) -> ChainsgdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ChainsgdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ChainsgdStatus::Panic
        }
    }
}

fn lib<T>(r: chainsgd::Result<T>) -> Result<T, (ChainsgdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ChainsgdStatus, String) {
    (ChainsgdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (ChainsgdStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn chainsgd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn chainsgd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Logistic chain over synthetic data; `*out` receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_problem_logistic(
    dim: usize,
    samples: usize,
    regularizer: ChainsgdRegularizer,
    rho: f64,
    seed: u64,
    out: *mut *mut ChainsgdProblem,
) -> ChainsgdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let kind = match regularizer {
            ChainsgdRegularizer::None => RegularizerKind::None,
            ChainsgdRegularizer::L2 => RegularizerKind::L2,
            ChainsgdRegularizer::NonconvexSmooth => RegularizerKind::NonconvexSmooth,
        };
        let spec = DatasetSpec {
            dim,
            samples,
            regularizer: kind,
            rho,
            seed,
            zero_truth: false,
        };
        let inner = lib(Problem::logistic(&spec))?;
        *out = Box::into_raw(Box::new(ChainsgdProblem { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_problem_free(problem: *mut ChainsgdProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// One run under a regime plan (`interval` is read only by the intermittent
/// regime). Uses the default run settings otherwise, starting from zero.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_run(
    problem: *const ChainsgdProblem,
    regime: ChainsgdRegime,
    sigma_f: f64,
    sigma_b: f64,
    interval: u64,
    step_size: f64,
    horizon: u64,
    seed: u64,
    out: *mut *mut ChainsgdTrace,
) -> ChainsgdStatus {
    guard(|| {
        let problem = &problem.as_ref().ok_or_else(|| null("problem"))?.inner;
        let out = out_ref(out, "out")?;
        let regime = match regime {
            ChainsgdRegime::FrequentZeroMean => Regime::FrequentZeroMean,
            ChainsgdRegime::FrequentBiasedBackward => Regime::FrequentBiasedBackward,
            ChainsgdRegime::IntermittentForward => Regime::IntermittentForward,
        };
        let norm_dim = Some(problem.chain.input_dim());
        let plan = experiments::regime_plan(
            &problem.chain,
            regime,
            sigma_f,
            sigma_b,
            Some(interval.max(1)),
            norm_dim,
        );
        let cfg = RunConfig {
            step_size,
            horizon,
            seed,
            ..RunConfig::default()
        };
        let inner = lib(optimizer::run(
            &problem.chain,
            &problem.samples,
            &plan,
            &cfg,
        ))?;
        *out = Box::into_raw(Box::new(ChainsgdTrace { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_trace_free(trace: *mut ChainsgdTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of recorded metric samples.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_trace_len(
    trace: *const ChainsgdTrace,
    out: *mut usize,
) -> ChainsgdStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        *out_ref(out, "out")? = t.inner.grad_norm.len();
        Ok(())
    })
}

/// Copies up to `capacity` gradient norms into `buffer`; `*written` gets the count.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_trace_grad_norms(
    trace: *const ChainsgdTrace,
    buffer: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> ChainsgdStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        let written = out_ref(written, "written")?;
        let n = t.inner.grad_norm.len().min(capacity);
        if n > 0 {
            if buffer.is_null() {
                return Err(null("buffer"));
            }
            ptr::copy_nonoverlapping(t.inner.grad_norm.as_ptr(), buffer, n);
        }
        *written = n;
        Ok(())
    })
}

/// Stable gradient norm, and the stable iteration or `-1` when not reached.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_trace_stability(
    trace: *const ChainsgdTrace,
    stable_gradient_norm: *mut f64,
    stable_iteration: *mut i64,
) -> ChainsgdStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        let m = optimizer::stability_metrics(&t.inner);
        *out_ref(stable_gradient_norm, "stable_gradient_norm")? = m.stable_gradient_norm;
        *out_ref(stable_iteration, "stable_iteration")? =
            m.stable_iteration.map_or(-1, |i| i as i64);
        Ok(())
    })
}

/// Event counts `(Q_δ, Q_ε)` and the divergence flag.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_trace_events(
    trace: *const ChainsgdTrace,
    q_delta: *mut u64,
    q_eps: *mut u64,
    diverged: *mut bool,
) -> ChainsgdStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        *out_ref(q_delta, "q_delta")? = t.inner.q_delta;
        *out_ref(q_eps, "q_eps")? = t.inner.q_eps;
        *out_ref(diverged, "diverged")? = t.inner.diverged;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_gd_bias(
    delta: f64,
    gamma: f64,
    horizon: u64,
    x0: f64,
    out: *mut ChainsgdGdBias,
) -> ChainsgdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let r = lib(experiments::counterexample_gd_bias(
            delta, gamma, horizon, x0,
        ))?;
        *out = ChainsgdGdBias {
            final_iterate: r.final_iterate,
            fixed_point: r.fixed_point,
            gap: r.gap,
            contraction_factor: r.contraction_factor,
            contracting: r.contracting,
            diverged: r.diverged,
        };
        Ok(())
    })
}

/// Fills `params` with the plain (`momentum == false`) or momentum setting.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_top1_default_params(
    momentum: bool,
    params: *mut ChainsgdTop1Params,
) -> ChainsgdStatus {
    guard(|| {
        let out = out_ref(params, "params")?;
        let p = if momentum {
            Top1Params::momentum()
        } else {
            Top1Params::plain()
        };
        *out = ChainsgdTop1Params {
            a: [p.a[0][0], p.a[0][1], p.a[1][0], p.a[1][1]],
            s: p.s,
            gamma: p.gamma,
            beta: p.beta,
            horizon: p.horizon,
            threshold: p.threshold,
        };
        Ok(())
    })
}

/// Runs the Top-1 construction. `clean` and `compressed` may be null; when not,
/// they receive new trace handles.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_top1(
    params: *const ChainsgdTop1Params,
    verdict: *mut ChainsgdTop1Verdict,
    clean: *mut *mut ChainsgdTrace,
    compressed: *mut *mut ChainsgdTrace,
) -> ChainsgdStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let verdict = out_ref(verdict, "verdict")?;
        let params = Top1Params {
            a: [[p.a[0], p.a[1]], [p.a[2], p.a[3]]],
            s: p.s,
            gamma: p.gamma,
            beta: p.beta,
            horizon: p.horizon,
            threshold: p.threshold,
        };
        let r = lib(experiments::counterexample_top1(&params))?;
        let v = &r.verdict;
        *verdict = ChainsgdTop1Verdict {
            clean_final_norm: v.clean_final_norm,
            compressed_min_norm: v.compressed_min_norm,
            compressed_diverged: v.compressed_diverged,
            clean_converged: v.clean_converged,
            compressed_stalls: v.compressed_stalls,
        };
        if let Some(c) = clean.as_mut() {
            *c = Box::into_raw(Box::new(ChainsgdTrace { inner: r.clean }));
        }
        if let Some(c) = compressed.as_mut() {
            *c = Box::into_raw(Box::new(ChainsgdTrace {
                inner: r.compressed,
            }));
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_sigmoid_bias(
    a: f64,
    draws: usize,
    seed: u64,
    out: *mut ChainsgdSigmoidBias,
) -> ChainsgdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let r = lib(experiments::counterexample_sigmoid_bias(a, draws, seed))?;
        *out = ChainsgdSigmoidBias {
            bias: r.bias,
            mc_bias: r.mc_bias,
            mc_std_error: r.mc_std_error,
            mc_agrees: r.mc_agrees,
        };
        Ok(())
    })
}

fn constants_from(c: &ChainsgdConstants) -> SmoothnessConstants {
    SmoothnessConstants {
        n_layers: c.n_layers,
        c_grad: c.c_grad,
        c_hess: c.c_hess,
        l_f: c.l_f,
        l_grad: c.l_grad,
        l_hess: c.l_hess,
        l_loss: c.l_loss,
        mu: (c.mu > 0.0).then_some(c.mu),
        sigma: c.sigma,
    }
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_coefficients(
    constants: *const ChainsgdConstants,
    out: *mut *mut ChainsgdCoefficients,
) -> ChainsgdStatus {
    guard(|| {
        let c = constants.as_ref().ok_or_else(|| null("constants"))?;
        let out = out_ref(out, "out")?;
        let k = constants_from(c);
        lib(k.validate())?;
        *out = Box::into_raw(Box::new(ChainsgdCoefficients {
            inner: bounds::coefficients(&k),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_coefficients_free(coefficients: *mut ChainsgdCoefficients) {
    if !coefficients.is_null() {
        drop(Box::from_raw(coefficients));
    }
}

/// `C_v = max{1, C_∇f^N}`.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_coefficients_c_v(
    h: *const ChainsgdCoefficients,
    out: *mut f64,
) -> ChainsgdStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("coefficients"))?;
        *out_ref(out, "out")? = h.inner.c_v;
        Ok(())
    })
}

/// Entry `index` (0-based, `0..N-1`) of one coefficient vector. Index `i`
/// refers to layer `i + 1` for the `δ` vectors and to layer `i + 2` for the
/// `ε` vectors.
#[no_mangle]
pub unsafe extern "C" fn chainsgd_coefficients_get(
    h: *const ChainsgdCoefficients,
    which: ChainsgdCoefficient,
    index: usize,
    out: *mut f64,
) -> ChainsgdStatus {
    guard(|| {
        let h = &h.as_ref().ok_or_else(|| null("coefficients"))?.inner;
        let out = out_ref(out, "out")?;
        let v = match which {
            ChainsgdCoefficient::VarDelta => &h.var_delta,
            ChainsgdCoefficient::VarEps => &h.var_eps,
            ChainsgdCoefficient::BiasDelta => &h.bias_delta,
            ChainsgdCoefficient::BiasDeltaTilde => &h.bias_delta_tilde,
            ChainsgdCoefficient::BiasEps => &h.bias_eps,
        };
        *out = *v.get(index).ok_or_else(|| {
            (
                ChainsgdStatus::InvalidArgument,
                format!("index {index} out of range 0..{}", v.len()),
            )
        })?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn chainsgd_admissibility(
    assumption: ChainsgdAssumption,
    zero_mean: bool,
    q_delta: u64,
    q_eps: u64,
    horizon: u64,
    slack: f64,
    out: *mut ChainsgdAdmissibility,
) -> ChainsgdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let a = match assumption {
            ChainsgdAssumption::Nonconvex => Assumption::Nonconvex,
            ChainsgdAssumption::Pl => Assumption::Pl,
        };
        let v = lib(bounds::admissibility(
            a, zero_mean, q_delta, q_eps, horizon, slack,
        ))?;
        let ch = |c: bounds::ChannelVerdict| ChainsgdChannel {
            count: c.count,
            limit: c.limit,
            ratio: c.ratio,
            admissible: c.admissible,
        };
        *out = ChainsgdAdmissibility {
            forward: ch(v.forward),
            backward: ch(v.backward),
        };
        Ok(())
    })
}
