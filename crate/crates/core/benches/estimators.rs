// Sequential (1-thread pool, which takes the plain-loop path) vs rayon pool.
// Build with --no-default-features to compare against the rayon-free build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use gaussorder::anticonc::{estimate_e_max_norm, estimate_sup_interval_prob, estimate_w_min_var};
use gaussorder::gauss::{build_covariance, Family, GaussianSampler};
use gaussorder::order_stats::coupling_rate;
use gaussorder::testing::{bootstrap_statistics, DataMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(usize, rayon::ThreadPool)> {
    let max = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    [1, max.max(4)].into_iter().map(|n| (n, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap())).collect()
}

fn sampler(p: usize) -> GaussianSampler {
    let model = build_covariance(Family::Ar1, p, &[0.7]).unwrap();
    GaussianSampler::new(model, 11).unwrap()
}

fn anticoncentration(c: &mut Criterion) {
    let s = sampler(64);
    let mut g = c.benchmark_group("anticonc_p64");
    g.sample_size(10);
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("sup_interval_k5_2e5", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(estimate_sup_interval_prob(&s, 5, 0.1, None, 200_000).unwrap())))
        });
        g.bench_with_input(BenchmarkId::new("e_max_norm_2e5", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(estimate_e_max_norm(&s, 200_000).unwrap())))
        });
        g.bench_with_input(BenchmarkId::new("coupling_k4_1e5", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(coupling_rate(&s, 4, 100_000).unwrap())))
        });
    }
    g.finish();

    let s = sampler(8);
    let mut g = c.benchmark_group("w_min_var_p8");
    g.sample_size(10);
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("k3_1e5", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(estimate_w_min_var(&s, 3, 100_000).unwrap())))
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let s = sampler(10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = DataMatrix::gaussian(&s, &[0.0; 10], 100, &mut rng).unwrap();
    let mut g = c.benchmark_group("bootstrap_p10_n100");
    g.sample_size(20);
    for (n, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("b500", n), &n, |b, _| {
            b.iter(|| pool.install(|| black_box(bootstrap_statistics(&data, 500, 5).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, anticoncentration, bootstrap);
criterion_main!(benches);
