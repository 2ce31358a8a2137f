use std::sync::Arc;

use chainsgd::bounds::{
    admissibility, bias_bound, coefficients, error_coefficients, estimate_constants_empirical,
    nonconvex_rate_bound, variance_bound, Assumption, PerLayerMoments, SmoothnessConstants,
};
use chainsgd::experiments::{gd_bias_chain, pass_states, DatasetSpec, Problem};
use chainsgd::operator::{Chain, PassState, Sample};
use chainsgd::optimizer::{run, RunConfig};
use chainsgd::perturbation::{
    top_k_compress, Distribution, PerturbationPlan, PlanEntry, Schedule, StreamKey,
};
use chainsgd::tensor::Tensor3;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn tensor_and_matrix() -> impl Strategy<Value = (Tensor3, DMatrix<f64>, DMatrix<f64>)> {
    (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(p, m, n)| {
        (
            prop::collection::vec(-5.0..5.0f64, p * m * n),
            prop::collection::vec(-5.0..5.0f64, m * n),
            prop::collection::vec(-5.0..5.0f64, m * n),
        )
            .prop_map(move |(h, a, b)| {
                (
                    Tensor3::from_vec(p, m, n, h).unwrap(),
                    DMatrix::from_vec(m, n, a),
                    DMatrix::from_vec(m, n, b),
                )
            })
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn contraction_is_bounded_by_operator_norm((h, a, _) in tensor_and_matrix()) {
        let lhs = h.contract(&a).unwrap().norm();
        prop_assert!(lhs <= h.operator_norm() * a.norm() * (1.0 + 1e-12) + 1e-12);
        prop_assert!(h.operator_norm() <= h.frobenius_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn contraction_is_bilinear((h, a, b) in tensor_and_matrix(), s in -3.0..3.0f64) {
        let sum = h.contract(&(&a + &b)).unwrap();
        let parts = h.contract(&a).unwrap() + h.contract(&b).unwrap();
        prop_assert!((sum - &parts).norm() <= 1e-10 * (1.0 + parts.norm()));
        let scaled = h.contract(&(&a * s)).unwrap();
        let expect = h.contract(&a).unwrap() * s;
        prop_assert!((scaled - &expect).norm() <= 1e-10 * (1.0 + expect.norm()));
        let hs = h.scale(s).contract(&a).unwrap();
        prop_assert!((hs - &expect).norm() <= 1e-10 * (1.0 + expect.norm()));
        let g = h.scale(0.5);
        let added = h.add(&g).unwrap().contract(&a).unwrap();
        let separate = h.contract(&a).unwrap() + g.contract(&a).unwrap();
        prop_assert!((added - &separate).norm() <= 1e-10 * (1.0 + separate.norm()));
    }

    #[test]
    fn top_k_is_idempotent_and_shrinks(v in prop::collection::vec(-10.0..10.0f64, 1..8), k in 1usize..8) {
        let k = k.min(v.len());
        let (c, implied) = top_k_compress(&v, k);
        prop_assert_eq!(&top_k_compress(&c, k).0, &c);
        prop_assert!(norm(&c) <= norm(&v));
        prop_assert!(c.iter().filter(|x| **x != 0.0).count() <= k);
        for ((ci, vi), di) in c.iter().zip(&v).zip(&implied) {
            prop_assert_eq!(ci - vi, *di);
        }
    }

    #[test]
    fn admissibility_is_monotone(
        qd in 0u64..5000, qe in 0u64..50_000, t in 1u64..100_000,
        dd in 0u64..5000, de in 0u64..50_000, slack in 0.1..10.0f64,
        pl in any::<bool>(), zm in any::<bool>(),
    ) {
        let a = if pl { Assumption::Pl } else { Assumption::Nonconvex };
        let big = admissibility(a, zm, qd, qe, t, slack).unwrap();
        let small = admissibility(a, zm, qd.saturating_sub(dd), qe.saturating_sub(de), t, slack).unwrap();
        prop_assert!(!big.forward.admissible || small.forward.admissible);
        prop_assert!(!big.backward.admissible || small.backward.admissible);
    }

    #[test]
    fn coefficients_grow_geometrically_in_depth(c in 1.05..3.0f64) {
        let first: Vec<f64> = (2..=6).map(|n| error_coefficients(&SmoothnessConstants::uniform(n, c)).0[0]).collect();
        for w in first.windows(2) {
            prop_assert!(w[1] / w[0] >= c * c);
        }
    }

    #[test]
    fn coefficient_monotone_structure(c in 1.0..3.0f64, n in 2usize..8) {
        let (delta, eps) = error_coefficients(&SmoothnessConstants::uniform(n, c));
        prop_assert!(delta.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(eps.windows(2).all(|w| w[1] >= w[0]));
        let k = coefficients(&SmoothnessConstants::uniform(n, c));
        prop_assert!(k.bias_delta.iter().chain(&k.bias_delta_tilde).chain(&k.bias_eps).all(|x| *x >= 0.0));
    }

    #[test]
    fn vanishing_moments_give_classical_bound(
        n in 2usize..6, c in 0.0..3.0f64, l in 0.1..5.0f64, sigma in 0.0..2.0f64,
        frac in 0.01..1.0f64, t in 1u64..200, delta0 in 0.0..10.0f64,
    ) {
        let k = SmoothnessConstants { l_loss: l, sigma, ..SmoothnessConstants::uniform(n, c) };
        let gamma = frac / (3.0 * l);
        let co = coefficients(&k);
        let z = PerLayerMoments::zeros(n);
        let v = vec![variance_bound(&co, &z); t as usize];
        let b = vec![bias_bound(&co, &z); t as usize];
        let got = nonconvex_rate_bound(&k, gamma, t, delta0, &v, &b).unwrap();
        let classic = 6.0 * delta0 / (gamma * t as f64) + 6.0 * l * gamma * sigma * sigma;
        prop_assert!((got - classic).abs() <= 1e-12 * classic.max(1.0));
    }

    #[test]
    fn gd_matches_heavy_ball_recurrence(
        gamma in 0.001..0.4f64, beta in 0.0..0.95f64, delta in -1.0..1.0f64, x0 in -3.0..3.0f64,
    ) {
        let chain = gd_bias_chain();
        let plan = PerturbationPlan::clean()
            .with_forward(1, PlanEntry::new(Distribution::Constant { value: vec![delta] }, Schedule::EveryIteration));
        let cfg = RunConfig {
            step_size: gamma,
            horizon: 50,
            momentum: beta,
            sampling_noise_std: 0.0,
            record_weights: true,
            initial_weights: Some(vec![x0]),
            ..RunConfig::default()
        };
        let trace = run(&chain, &[Sample::new(vec![1.0], vec![])], &plan, &cfg).unwrap();
        let (mut prev, mut x) = (x0, x0);
        for w in trace.weights.iter().skip(1) {
            let next = x - gamma * 2.0 * (x + delta) + beta * (x - prev);
            prev = x;
            x = next;
            prop_assert!((w[0] - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

fn small_problem(seed: u64) -> Problem {
    Problem::logistic(&DatasetSpec {
        dim: 3,
        samples: 12,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn enlarging_corpus_never_lowers_estimates(seed in 0u64..1000, split in 2usize..30) {
        let p = small_problem(seed);
        let mut st = PassState::new(&p.chain);
        let mut corpus = Vec::new();
        for (k, s) in p.samples.iter().enumerate() {
            let w: Vec<f64> = (0..3).map(|j| ((k * 3 + j) as f64 * 0.37 + seed as f64).sin()).collect();
            p.chain.gradient(s, &w, None, &mut st).unwrap();
            corpus.extend(pass_states(&p.chain, s, &w, &st));
        }
        let split = split.min(corpus.len());
        let pairs = usize::MAX;
        let small = estimate_constants_empirical(&p.chain, &corpus[..split], pairs, 0).unwrap().constants;
        let big = estimate_constants_empirical(&p.chain, &corpus, pairs, 0).unwrap().constants;
        prop_assert!(big.c_grad >= small.c_grad && big.c_hess >= small.c_hess);
        prop_assert!(big.l_f >= small.l_f && big.l_grad >= small.l_grad && big.l_hess >= small.l_hess);
    }

    #[test]
    fn adjoints_stay_below_c_v(seed in 0u64..1000, gamma in 0.01..0.5f64) {
        let p = small_problem(seed);
        let cfg = RunConfig { step_size: gamma, horizon: 40, record_weights: true, ..RunConfig::default() };
        let trace = run(&p.chain, &p.samples, &PerturbationPlan::clean(), &cfg).unwrap();
        let mut st = PassState::new(&p.chain);
        let mut corpus = Vec::new();
        let mut adjoint_norms = Vec::new();
        for w in &trace.weights {
            for s in &p.samples {
                p.chain.gradient(s, w, None, &mut st).unwrap();
                corpus.extend(pass_states(&p.chain, s, w, &st));
                adjoint_norms.extend(st.adjoints[1..].iter().map(|v| norm(v)));
            }
        }
        let k = estimate_constants_empirical(&p.chain, &corpus, 10_000, seed).unwrap().constants;
        let cv = chainsgd::bounds::c_v(&k);
        prop_assert!(adjoint_norms.iter().all(|n| *n <= cv * (1.0 + 1e-12)));
    }

    #[test]
    fn all_zero_plan_matches_clean_passes(seed in 0u64..1000, t in 0u64..100) {
        let p = small_problem(seed);
        let zero = |n: usize| PlanEntry::new(Distribution::Constant { value: vec![0.0; n] }, Schedule::EveryIteration);
        let plan = PerturbationPlan::clean().with_forward(1, zero(1)).with_backward(2, zero(1));
        let w = [0.3, -0.2, 0.9];
        let mut a = PassState::new(&p.chain);
        let mut b = PassState::new(&p.chain);
        for s in &p.samples {
            p.chain.gradient(s, &w, None, &mut a).unwrap();
            p.chain.gradient(s, &w, Some((&plan, StreamKey::new(seed, t, 0))), &mut b).unwrap();
            prop_assert_eq!(&a.outputs, &b.outputs);
            prop_assert_eq!(&a.adjoints, &b.adjoints);
            prop_assert_eq!(&a.weight_grads, &b.weight_grads);
        }
    }

    #[test]
    fn event_logs_are_reproducible(seed in 0u64..1000, interval in 1u64..20) {
        let chain: Chain = gd_bias_chain();
        let plan = PerturbationPlan::clean()
            .with_forward(1, PlanEntry::new(
                Distribution::Gaussian { mean: vec![0.0], std: vec![0.3] },
                Schedule::Periodic { interval, phase: 0 },
            ))
            .with_backward(2, PlanEntry::new(
                Distribution::ZeroMeanUniform { scale: 0.2, norm_dim: None },
                Schedule::EveryIteration,
            ));
        let cfg = RunConfig { step_size: 0.05, horizon: 100, seed, ..RunConfig::default() };
        let data = [Sample::new(vec![1.0], vec![])];
        let a = run(&chain, &data, &plan, &cfg).unwrap();
        let b = run(&chain, &data, &plan, &cfg).unwrap();
        prop_assert_eq!(&a.delta_active, &b.delta_active);
        prop_assert_eq!(&a.delta_sq, &b.delta_sq);
        prop_assert_eq!(&a.eps_sq, &b.eps_sq);
        prop_assert_eq!(a.q_delta, 100u64.div_ceil(interval));
    }
}

#[test]
fn chain_is_shareable_across_threads() {
    let chain = Arc::new(gd_bias_chain());
    let handles: Vec<_> = (0..3)
        .map(|k| {
            let c = Arc::clone(&chain);
            std::thread::spawn(move || {
                let cfg = RunConfig {
                    step_size: 0.1,
                    horizon: 20,
                    seed: k,
                    ..RunConfig::default()
                };
                run(
                    &c,
                    &[Sample::new(vec![1.0], vec![])],
                    &PerturbationPlan::clean(),
                    &cfg,
                )
                .unwrap()
                .final_weights
            })
        })
        .collect();
    let out: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(out.iter().all(|w| w.len() == 1));
}
