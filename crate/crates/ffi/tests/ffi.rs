use std::ffi::CStr;
use std::path::Path;
use std::process::Command;
use std::ptr;

use chainsgd_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(chainsgd_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn gd_bias_reaches_shifted_fixed_point() {
    let mut r = std::mem::MaybeUninit::<ChainsgdGdBias>::zeroed();
    let s = unsafe { chainsgd_gd_bias(0.5, 0.1, 200, 1.0, r.as_mut_ptr()) };
    assert_eq!(s, ChainsgdStatus::Ok);
    let r = unsafe { r.assume_init() };
    assert_eq!(r.fixed_point, -0.5);
    assert!(r.gap < 1e-9 && r.contracting);
    assert_eq!(last_error(), "");
}

#[test]
fn top1_handles_and_verdict() {
    let mut p = std::mem::MaybeUninit::<ChainsgdTop1Params>::zeroed();
    assert_eq!(
        unsafe { chainsgd_top1_default_params(false, p.as_mut_ptr()) },
        ChainsgdStatus::Ok
    );
    let p = unsafe { p.assume_init() };
    assert_eq!(p.a, [-15.0, 13.0, -5.0, 9.0]);
    let mut v = std::mem::MaybeUninit::<ChainsgdTop1Verdict>::zeroed();
    let mut clean: *mut ChainsgdTrace = ptr::null_mut();
    let s = unsafe { chainsgd_top1(&p, v.as_mut_ptr(), &mut clean, ptr::null_mut()) };
    assert_eq!(s, ChainsgdStatus::Ok);
    let v = unsafe { v.assume_init() };
    assert!(v.clean_converged && v.compressed_stalls);
    let mut n = 0usize;
    assert_eq!(
        unsafe { chainsgd_trace_len(clean, &mut n) },
        ChainsgdStatus::Ok
    );
    assert!(n > 0);
    unsafe { chainsgd_trace_free(clean) };
}

#[test]
fn sigmoid_bias_value() {
    let mut r = std::mem::MaybeUninit::<ChainsgdSigmoidBias>::zeroed();
    assert_eq!(
        unsafe { chainsgd_sigmoid_bias(1.0, 1000, 3, r.as_mut_ptr()) },
        ChainsgdStatus::Ok
    );
    let r = unsafe { r.assume_init() };
    assert!((r.bias - 0.053388).abs() < 1e-6 && r.mc_agrees);
    assert_eq!(
        unsafe { chainsgd_sigmoid_bias(-1.0, 1000, 3, &mut std::mem::zeroed()) },
        ChainsgdStatus::InvalidArgument
    );
    assert!(last_error().contains("positive"));
}

#[test]
fn coefficients_for_unit_constants() {
    let k = ChainsgdConstants {
        n_layers: 2,
        c_grad: 1.0,
        c_hess: 1.0,
        l_f: 1.0,
        l_grad: 1.0,
        l_hess: 1.0,
        l_loss: 1.0,
        mu: 0.0,
        sigma: 0.0,
    };
    let mut h: *mut ChainsgdCoefficients = ptr::null_mut();
    assert_eq!(
        unsafe { chainsgd_coefficients(&k, &mut h) },
        ChainsgdStatus::Ok
    );
    let get = |which, i| {
        let mut x = f64::NAN;
        let s = unsafe { chainsgd_coefficients_get(h, which, i, &mut x) };
        (s, x)
    };
    assert_eq!(
        get(ChainsgdCoefficient::VarDelta, 0),
        (ChainsgdStatus::Ok, 16.0)
    );
    assert_eq!(
        get(ChainsgdCoefficient::VarEps, 0),
        (ChainsgdStatus::Ok, 3.0)
    );
    assert_eq!(
        get(ChainsgdCoefficient::BiasEps, 0),
        (ChainsgdStatus::Ok, 6.0)
    );
    assert_eq!(
        get(ChainsgdCoefficient::VarEps, 1).0,
        ChainsgdStatus::InvalidArgument
    );
    let mut cv = 0.0;
    assert_eq!(
        unsafe { chainsgd_coefficients_c_v(h, &mut cv) },
        ChainsgdStatus::Ok
    );
    assert_eq!(cv, 1.0);
    unsafe { chainsgd_coefficients_free(h) };
}

#[test]
fn admissibility_probe() {
    let mut out = std::mem::MaybeUninit::<ChainsgdAdmissibility>::zeroed();
    let s = unsafe {
        chainsgd_admissibility(
            ChainsgdAssumption::Pl,
            true,
            100,
            10_000,
            10_000,
            1.0,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(s, ChainsgdStatus::Ok);
    let out = unsafe { out.assume_init() };
    assert!(!out.forward.admissible && out.backward.admissible);
    let s = unsafe {
        chainsgd_admissibility(
            ChainsgdAssumption::Pl,
            true,
            1,
            1,
            0,
            1.0,
            &mut std::mem::zeroed(),
        )
    };
    assert_eq!(s, ChainsgdStatus::InvalidArgument);
}

#[test]
fn null_pointers_are_rejected() {
    assert_eq!(
        unsafe { chainsgd_gd_bias(0.5, 0.1, 10, 1.0, ptr::null_mut()) },
        ChainsgdStatus::NullPointer
    );
    assert!(last_error().contains("null"));
    let mut n = 0usize;
    assert_eq!(
        unsafe { chainsgd_trace_len(ptr::null(), &mut n) },
        ChainsgdStatus::NullPointer
    );
    unsafe {
        chainsgd_trace_free(ptr::null_mut());
        chainsgd_problem_free(ptr::null_mut());
    }
}

#[test]
fn problem_run_roundtrip() {
    let mut p: *mut ChainsgdProblem = ptr::null_mut();
    let s = unsafe {
        chainsgd_problem_logistic(
            4,
            30,
            ChainsgdRegularizer::NonconvexSmooth,
            0.001,
            1,
            &mut p,
        )
    };
    assert_eq!(s, ChainsgdStatus::Ok);
    let mut t: *mut ChainsgdTrace = ptr::null_mut();
    let s = unsafe {
        chainsgd_run(
            p,
            ChainsgdRegime::IntermittentForward,
            2.0,
            0.0,
            10,
            0.01,
            100,
            7,
            &mut t,
        )
    };
    assert_eq!(s, ChainsgdStatus::Ok);
    let (mut qd, mut qe, mut div) = (0u64, 0u64, true);
    assert_eq!(
        unsafe { chainsgd_trace_events(t, &mut qd, &mut qe, &mut div) },
        ChainsgdStatus::Ok
    );
    assert_eq!((qd, qe, div), (10, 0, false));
    let mut buf = [0.0f64; 200];
    let mut written = 0usize;
    let s = unsafe { chainsgd_trace_grad_norms(t, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!((s, written), (ChainsgdStatus::Ok, 100));
    let (mut g, mut it) = (0.0, 0i64);
    assert_eq!(
        unsafe { chainsgd_trace_stability(t, &mut g, &mut it) },
        ChainsgdStatus::Ok
    );
    assert!(g.is_finite() && g > 0.0);
    let s = unsafe {
        chainsgd_run(
            p,
            ChainsgdRegime::FrequentZeroMean,
            0.0,
            0.0,
            1,
            -1.0,
            100,
            7,
            &mut t,
        )
    };
    assert_eq!(s, ChainsgdStatus::InvalidArgument);
    unsafe {
        chainsgd_trace_free(t);
        chainsgd_problem_free(p);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(chainsgd_version()) }
        .to_str()
        .unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_and_parses() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("chainsgd.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "chainsgd_gd_bias",
        "chainsgd_top1",
        "chainsgd_sigmoid_bias",
        "chainsgd_coefficients",
        "chainsgd_admissibility",
        "chainsgd_last_error",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"chainsgd.h\"\nint main(void) { ChainsgdGdBias r; return chainsgd_gd_bias(0.5, 0.1, 200, 1.0, &r) == CHAINSGD_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(e) => println!("no C compiler available ({e}); syntax check skipped"),
    }
}
