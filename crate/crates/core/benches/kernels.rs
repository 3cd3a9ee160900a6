//! Parallel vs single-threaded timings of the hot paths.
//!
//! "seq" runs inside a one-worker pool; build with `--no-default-features` to time the
//! rayon-free fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deqlab::gmm::{compute_stats, paper_default_model, sample_gmm};
use deqlab::kernels::{implicit_ck_exact, implicit_montecarlo, McOptions};
use deqlab::rmt_equiv::approx_implicit_ck;
use deqlab::scalar_system::ck_coefficients;
use deqlab::spectra::{spectral_norm, DEFAULT_TOL};
use deqlab::{par, Activation, DeqConfig};

fn modes() -> [(&'static str, Option<usize>); 2] {
    [("seq", Some(1)), ("par", None)]
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);

    let model = paper_default_model(64, 2).unwrap().with_equal_sizes(80);
    let s = sample_gmm(&model, 1).unwrap();
    let stats = compute_stats(&model, &s).unwrap();
    let cfg = DeqConfig::new(Activation::tanh(), 0.2, 1.0, stats.tau0);
    let small = s.truncate(24);

    for (name, threads) in modes() {
        group.bench_function(BenchmarkId::new("montecarlo_m1024_n80", name), |b| {
            b.iter(|| par::install(threads, || implicit_montecarlo(&cfg, &s.x, &McOptions::new(1024, 3)).unwrap()))
        });
        group.bench_function(BenchmarkId::new("exact_ck_n24", name), |b| {
            b.iter(|| par::install(threads, || implicit_ck_exact(&cfg, &small.x, 1e-10).unwrap()))
        });
    }

    let model = paper_default_model(410, 2).unwrap().with_equal_sizes(512);
    let big = sample_gmm(&model, 2).unwrap();
    let big_stats = compute_stats(&model, &big).unwrap();
    let ck = ck_coefficients(&DeqConfig::new(Activation::relu(), 0.2, 1.0, big_stats.tau0)).unwrap();
    let g = approx_implicit_ck(&ck, &big_stats, &big.x).unwrap();
    for (name, threads) in modes() {
        group.bench_function(BenchmarkId::new("rmt_assemble_n512", name), |b| {
            b.iter(|| par::install(threads, || approx_implicit_ck(&ck, &big_stats, &big.x).unwrap()))
        });
        group.bench_function(BenchmarkId::new("spectral_norm_n512", name), |b| {
            b.iter(|| par::install(threads, || spectral_norm(&g.data, DEFAULT_TOL).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
