use deqlab::gmm::{compute_stats, paper_default_model, sample_gmm, Sample};
use deqlab::kernels::*;
use deqlab::rng::{self, Domain};
use deqlab::scalar_system::{explicit_coefficients, DeqConfig};
use deqlab::{par, Activation};
use ndarray::{Array1, Array2};

fn instance(n: usize, p: usize, seed: u64) -> (Sample, f64) {
    let model = paper_default_model(p, 2).unwrap().with_equal_sizes(n);
    let s = sample_gmm(&model, seed).unwrap();
    let tau0 = compute_stats(&model, &s).unwrap().tau0;
    (s, tau0)
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn cfg(act: Activation, tau0: f64) -> DeqConfig {
    DeqConfig::new(act, 0.2, 1.0, tau0)
}

#[test]
fn linear_fixed_point_in_closed_form() {
    let (s, tau0) = instance(8, 64, 1);
    let (g, gd) = implicit_ck_exact(&cfg(Activation::linear(), tau0), &s.x, 1e-14).unwrap();
    let want = gram(&s.x) * (1.0 / 0.8);
    assert!(max_abs(&g.data, &want) < 1e-10, "{}", max_abs(&g.data, &want));
    assert!(gd.data.iter().all(|v| (v - 0.2).abs() < 1e-13));
    assert!(g.is_symmetric());
}

#[test]
fn zero_feedback_converges_in_one_layer() {
    let (s, tau0) = instance(6, 64, 2);
    let c = DeqConfig::new(Activation::tanh(), 0.0, 1.0, tau0);
    let st = implicit_recursion(&c, &s.x, RecursionOptions::default()).unwrap();
    // The first layer already sits at the limit; the second only confirms it.
    assert!(st.layer <= 2);
    assert!(st.deltas.last().unwrap().abs() < 1e-15);
    let act = c.centered().unwrap().0;
    let xtx = gram(&s.x);
    let want = deqlab::gauss_quad::pair_ck(&act, xtx[[0, 0]], xtx[[1, 1]], xtx[[0, 1]], 96).unwrap();
    assert!((st.g[[0, 1]] - want).abs() < 1e-14);
}

#[test]
fn ntk_matches_finite_depth_sum() {
    for act in [Activation::tanh(), Activation::relu()] {
        let (s, tau0) = instance(8, 64, 3);
        let c = cfg(act, tau0);
        let (g, gd) = implicit_ck_exact(&c, &s.x, 1e-14).unwrap();
        let k = implicit_ntk_from_ck(&g, &gd).unwrap();
        let kl = implicit_ntk_finite_depth(&c, &s.x, 300).unwrap();
        assert!(max_abs(&k.data, &kl.data) < 1e-8, "{}", max_abs(&k.data, &kl.data));
        // Dominance: 0 ≤ Ġ < 1 so |K| ≥ |G| with the same sign.
        for (kv, gv) in k.data.iter().zip(&g.data) {
            assert!(kv.abs() + 1e-15 >= gv.abs() && kv * gv >= 0.0);
        }
    }
}

#[test]
fn recursion_contracts() {
    let (s, tau0) = instance(8, 64, 4);
    let st = implicit_recursion(&cfg(Activation::swish(), tau0), &s.x, RecursionOptions::default()).unwrap();
    let d = &st.deltas;
    for w in d[3..].windows(2) {
        if w[0] > 1e-13 {
            assert!(w[1] < w[0], "{d:?}");
        }
    }
}

#[test]
fn permutation_equivariance() {
    let (s, tau0) = instance(6, 64, 5);
    let perm = [3, 0, 5, 1, 4, 2];
    let sp = s.permute(&perm);
    let c = cfg(Activation::relu(), tau0);
    let g = implicit_ck_exact(&c, &s.x, 1e-13).unwrap().0.data;
    let gp = implicit_ck_exact(&c, &sp.x, 1e-13).unwrap().0.data;
    for i in 0..6 {
        for j in 0..6 {
            assert!((gp[[i, j]] - g[[perm[i], perm[j]]]).abs() < 1e-12);
        }
    }
}

#[test]
fn montecarlo_agrees_with_quadrature() {
    let (s, tau0) = instance(8, 64, 6);
    let c = cfg(Activation::tanh(), tau0);
    let (g, _) = implicit_ck_exact(&c, &s.x, 1e-13).unwrap();
    let m = 4096;
    let mc = implicit_ck_montecarlo(&c, &s.x, m, 100, 1, 11).unwrap();
    assert_eq!(mc.method, Method::MonteCarlo);
    assert!(mc.is_symmetric());
    let err = max_abs(&g.data, &mc.data);
    assert!(err < 4.0 / (m as f64).sqrt(), "{err}");
}

#[test]
fn lazy_backend_agrees_with_quadrature() {
    let (s, tau0) = instance(8, 64, 7);
    let c = cfg(Activation::tanh(), tau0);
    let (g, gd) = implicit_ck_exact(&c, &s.x, 1e-13).unwrap();
    let m = 1 << 14;
    let opts = McOptions { backend: McBackend::Lazy, ..McOptions::new(m, 5) };
    let r = implicit_montecarlo(&c, &s.x, &opts).unwrap();
    let tol = 4.0 / (m as f64).sqrt();
    assert!(max_abs(&g.data, &r.g.data) < tol, "{}", max_abs(&g.data, &r.g.data));
    assert!(max_abs(&gd.data, &r.gdot.data) < tol, "{}", max_abs(&gd.data, &r.gdot.data));
}

#[test]
fn montecarlo_estimates_gram_without_feedback() {
    let p = 32;
    let n = 5;
    let mut x = Array2::<f64>::zeros((p, n));
    let mut g = rng::substream(9, Domain::Test, 0, 0);
    let mut col = vec![0.0; p];
    for j in 0..n {
        rng::fill_normal(&mut g, &mut col);
        let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..p {
            x[[i, j]] = col[i] / nrm;
        }
    }
    let c = DeqConfig::new(Activation::linear(), 0.0, 1.0, 1.0);
    let k = implicit_ck_montecarlo(&c, &x, 1 << 14, 100, 1, 3).unwrap();
    assert!(max_abs(&k.data, &gram(&x)) < 0.05);
}

#[test]
fn montecarlo_is_thread_count_invariant() {
    let (s, tau0) = instance(70, 64, 8);
    let c = cfg(Activation::swish(), tau0);
    let run = |t| par::install(Some(t), || implicit_ck_montecarlo(&c, &s.x, 512, 100, 2, 17).unwrap());
    let a = run(1);
    let b = run(3);
    assert_eq!(a.to_bytes(), b.to_bytes());
    let opts = McOptions { backend: McBackend::Lazy, ..McOptions::new(256, 4) };
    let la = par::install(Some(1), || implicit_montecarlo(&c, &s.x.slice(ndarray::s![.., ..6]).to_owned(), &opts).unwrap());
    let lb = par::install(Some(4), || implicit_montecarlo(&c, &s.x.slice(ndarray::s![.., ..6]).to_owned(), &opts).unwrap());
    assert_eq!(la.g.to_bytes(), lb.g.to_bytes());
}

#[test]
fn dense_backend_respects_memory_budget() {
    let (s, tau0) = instance(4, 64, 9);
    let opts = McOptions { backend: McBackend::Dense, memory_budget: 1 << 20, ..McOptions::new(1024, 1) };
    let e = implicit_montecarlo(&cfg(Activation::tanh(), tau0), &s.x, &opts).unwrap_err();
    assert!(matches!(e, deqlab::DeqError::OutOfMemory(_)));
}

#[test]
fn explicit_examples() {
    let (s, tau0) = instance(6, 64, 10);
    let l1 = explicit_ck_exact(&[Activation::linear()], &s.x, tau0).unwrap();
    assert!(max_abs(&l1[0].data, &gram(&s.x)) < 1e-12);
    let id = Activation::leaky_relu(1.0, 1.0).unwrap();
    let l2 = explicit_ck_exact(&[id, id], &s.x, tau0).unwrap();
    assert_eq!(l2.len(), 2);
    assert!(max_abs(&l2[1].data, &gram(&s.x)) < 1e-12);
    let th = explicit_ntk_exact(&[Activation::linear()], &s.x, tau0).unwrap();
    assert!(max_abs(&th.data, &(gram(&s.x) * 2.0)) < 1e-12);

    let mut x = Array2::<f64>::zeros((3, 2));
    x[[0, 0]] = 1.0;
    x[[1, 1]] = 1.0;
    let r = explicit_ck_exact(&[Activation::relu()], &x, 1.0).unwrap();
    let d = 0.5 - 0.5 / std::f64::consts::PI;
    assert!((r[0].data[[0, 0]] - d).abs() < 1e-12);
    assert!(r[0].data[[0, 1]].abs() < 1e-12);

    let flat = Activation::hard_tanh(1.0, 0.0).unwrap();
    let t = explicit_ntk_exact(&[Activation::tanh(), flat], &s.x, tau0).unwrap();
    let c = explicit_ck_exact(&[Activation::tanh(), flat], &s.x, tau0).unwrap();
    assert_eq!(t.data, c[1].data);
}

/// NTK of f(x) = wᵀσ₂(W₂σ₁(W₁x)/√m)/√m by back-propagation, all weights N(0, 1).
fn wide_two_layer_ntk(layers: &[Activation], x: &Array2<f64>, m: usize, seed: u64) -> Array2<f64> {
    let (p, n) = x.dim();
    let sm = (m as f64).sqrt();
    let w1 = deqlab::kernels::gaussian_rows(m, p, seed, Domain::Test, 1);
    let h1 = w1.dot(x);
    let x1 = h1.mapv(|v| layers[0].eval(v) / sm);
    let d1 = h1.mapv(|v| layers[0].deriv(v));
    let mut w = vec![0.0; m];
    rng::fill_normal(&mut rng::substream(seed, Domain::Test, 3, 0), &mut w);
    let mut h2 = Array2::<f64>::zeros((m, n));
    let mut back = Array2::<f64>::zeros((m, n));
    let mut row = vec![0.0; m];
    for k in 0..m {
        rng::fill_normal(&mut rng::substream(seed, Domain::Test, 2, k as u64), &mut row);
        let r = Array1::from(row.clone());
        let hk = r.dot(&x1);
        for j in 0..n {
            h2[[k, j]] = hk[j];
            let v = w[k] * layers[1].deriv(hk[j]);
            back.column_mut(j).scaled_add(v, &r);
        }
    }
    let x2 = h2.mapv(|v| layers[1].eval(v) / sm);
    let dw2 = Array2::from_shape_fn((m, n), |(k, j)| w[k] * layers[1].deriv(h2[[k, j]]) / sm);
    let delta1 = Array2::from_shape_fn((m, n), |(k, j)| back[[k, j]] / sm * d1[[k, j]] / sm);
    let xtx = x.t().dot(x);
    x2.t().dot(&x2) + &(x1.t().dot(&x1) * &dw2.t().dot(&dw2)) + &(xtx * &delta1.t().dot(&delta1))
}

#[test]
fn explicit_ntk_matches_wide_network() {
    let (s, _) = instance(6, 64, 12);
    let mut x = s.x.clone();
    for mut c in x.columns_mut() {
        let nrm = c.dot(&c).sqrt();
        c /= nrm;
    }
    let layers = [Activation::relu(), Activation::relu()];
    let centered = explicit_coefficients(&layers, 1.0).unwrap().layers;
    let want = explicit_ntk_exact(&layers, &x, 1.0).unwrap();
    let m = 1 << 15;
    let got = wide_two_layer_ntk(&centered, &x, m, 21);
    let err = max_abs(&want.data, &got);
    assert!(err < 5.0 / (m as f64).sqrt(), "{err}");
}

#[test]
fn binary_and_csv_export() {
    let dir = tempfile::tempdir().unwrap();
    let (s, tau0) = instance(4, 64, 13);
    let k = explicit_ck_exact(&[Activation::tanh()], &s.x, tau0).unwrap().remove(0);
    let bin = dir.path().join("k.bin");
    k.write_binary(&bin).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    assert_eq!(&bytes[..4], b"DKLK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), KernelKind::ExplicitCk.code());
    let back = KernelMatrix::read_binary(&bin).unwrap();
    assert_eq!(back.data, k.data);
    let csv = k.to_csv();
    let parsed: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
    assert_eq!(parsed, k.data.iter().cloned().collect::<Vec<_>>());
}
