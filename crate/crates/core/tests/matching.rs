use deqlab::gmm::{compute_stats, paper_default_model, sample_gmm};
use deqlab::matching::*;
use deqlab::rmt_equiv::{approx_explicit_ck, approx_implicit_ck};
use deqlab::scalar_system::{ck_coefficients, explicit_coefficients};
use deqlab::spectra::{spectral_norm, DEFAULT_TOL};
use deqlab::{Activation, DeqConfig, DeqError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_tau0() -> f64 {
    let model = paper_default_model(256, 2).unwrap().with_equal_sizes(320);
    let s = sample_gmm(&model, 0).unwrap();
    compute_stats(&model, &s).unwrap().tau0
}

fn deq_target(act: Activation, tau0: f64) -> MatchTarget {
    let ck = ck_coefficients(&DeqConfig::new(act, 0.2, 1.0, tau0)).unwrap();
    MatchTarget::from_ck(&ck, tau0)
}

#[test]
fn hard_tanh_round_trip() {
    let tau0 = 1.4;
    let net = [Activation::hard_tanh(1.2, 0.8).unwrap()];
    let target = MatchTarget::from_layers(&net, tau0).unwrap();
    assert_eq!(decide_depth(&target, 1e-8), 1);
    let r = match_activation(&target, 1).unwrap();
    assert!(r.converged);
    assert!(r.max_residual() < 1e-8, "{:?}", r.residuals);
    assert!((r.params[0] - 1.2).abs() < 1e-6 && (r.params[1] - 0.8).abs() < 1e-6, "{:?}", r.params);
}

#[test]
fn depth_rule_for_default_deqs() {
    let tau0 = default_tau0();
    assert_eq!(decide_depth(&deq_target(Activation::relu(), tau0), 1e-8), 2);
    assert_eq!(decide_depth(&deq_target(Activation::tanh(), tau0), 1e-8), 1);
}

#[test]
fn tanh_deq_matches_one_hard_tanh_layer() {
    let tau0 = default_tau0();
    let target = deq_target(Activation::tanh(), tau0);
    let r = match_activation(&target, 1).unwrap();
    assert!(r.max_residual() < 1e-6, "{:?}", r.residuals);
}

#[test]
fn relu_deq_matches_two_leaky_relu_layers() {
    let tau0 = default_tau0();
    let target = deq_target(Activation::relu(), tau0);
    let r = match_activation(&target, 2).unwrap();
    assert!(r.max_residual() < 1e-6, "{:?}", r.residuals);
    assert!(r.params[0] >= r.params[1] && r.params[1] >= 0.0);
    assert!(r.params[2] >= r.params[3] && r.params[3] >= 0.0);
}

#[test]
fn matched_equivalents_coincide() {
    let model = paper_default_model(64, 2).unwrap().with_equal_sizes(80);
    let s = sample_gmm(&model, 3).unwrap();
    let stats = compute_stats(&model, &s).unwrap();
    for (act, depth) in [(Activation::tanh(), 1), (Activation::relu(), 2)] {
        let ck = ck_coefficients(&DeqConfig::new(act, 0.2, 1.0, stats.tau0)).unwrap();
        let r = match_activation(&MatchTarget::from_ck(&ck, stats.tau0), depth).unwrap();
        let ex = explicit_coefficients(&r.layers, stats.tau0).unwrap();
        let g = approx_implicit_ck(&ck, &stats, &s.x).unwrap();
        let sigma = approx_explicit_ck(&ex, &stats, &s.x).unwrap();
        let err = spectral_norm(&(&g.data - &sigma.data), DEFAULT_TOL).unwrap() / spectral_norm(&g.data, DEFAULT_TOL).unwrap();
        assert!(err < 1e-8, "{:?}: {err}", act.family);
    }
}

#[test]
fn inconsistent_depth_one_is_rejected() {
    let target = MatchTarget { alpha1: 0.5, alpha2: 0.3, alpha3: 0.1, gamma_star: 1.0, tau0: 1.0 };
    assert!(matches!(match_activation(&target, 1), Err(DeqError::DepthInsufficient { .. })));
}

#[test]
fn residuals_vanish_at_a_solution_and_grow_linearly() {
    let tau0 = 1.1;
    let params = [1.3, 0.4, 0.9, 0.2];
    let layers = MatchFamily::LeakyRelu2.layers(&params).unwrap();
    let target = MatchTarget::from_layers(&layers, tau0).unwrap();
    let r0 = match_residuals(&params, MatchFamily::LeakyRelu2, &target).unwrap();
    assert!(r0.iter().all(|v| v.abs() < 1e-10));
    let norm = |eps: f64| {
        let mut p = params;
        p[2] += eps;
        let r = match_residuals(&p, MatchFamily::LeakyRelu2, &target).unwrap();
        r.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let ratio = norm(2e-4) / norm(1e-4);
    assert!((ratio - 2.0).abs() < 1e-2, "{ratio}");
}

#[test]
fn gradient_matches_finite_differences() {
    let target = MatchTarget { alpha1: 0.6, alpha2: 0.02, alpha3: 0.05, gamma_star: 0.9, tau0: 1.2 };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let a1: f64 = rng.random_range(0.5..2.0);
        let a2: f64 = rng.random_range(0.5..2.0);
        let p = [a1, a1 * rng.random_range(0.1..0.9), a2, a2 * rng.random_range(0.1..0.9)];
        let g = objective_gradient(&p, MatchFamily::LeakyRelu2, &target).unwrap();
        for i in 0..4 {
            let h = 1e-5;
            let mut up = p;
            let mut dn = p;
            up[i] += h;
            dn[i] -= h;
            let fd = (objective(&up, MatchFamily::LeakyRelu2, &target).unwrap()
                - objective(&dn, MatchFamily::LeakyRelu2, &target).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-8), "{i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn more_restarts_never_do_worse() {
    let tau0 = default_tau0();
    let target = deq_target(Activation::relu(), tau0);
    let few = MatchOptions { restarts: 5, ..MatchOptions::default() };
    let small = match_activation_with(&target, 2, &few).unwrap();
    let full = match_activation(&target, 2).unwrap();
    // The first five restarts are shared, so the full search picks from a superset.
    assert!(full.objective <= small.objective);
    assert_eq!(full, match_activation(&target, 2).unwrap());
}

#[test]
fn matching_ignores_the_target_shift() {
    let tau0 = default_tau0();
    let a = deq_target(Activation::relu(), tau0);
    let b = deq_target(Activation::relu().with_shift(0.37), tau0);
    assert_eq!(a, b);
}
