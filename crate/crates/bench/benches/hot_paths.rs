use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use elicit_bench::objective;
use elicit_core::diffcore::{Graph, PairKernel};
use elicit_core::samplers::{relaxed_count, CountFamily, NoiseBank};

fn energy_kernel(c: &mut Criterion) {
    let bank = NoiseBank::new(1, 0);
    let mut group = c.benchmark_group("energy_kernel_forward_backward");
    for n in [64, 256] {
        let x = bank.normal(1, n * 9);
        let y = bank.normal(2, 300 * 9);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.input(&[n, 9], x.clone()).unwrap();
                let yv = g.constant(&[300, 9], y.clone()).unwrap();
                let k = g.pairwise_kernel_mean(xv, yv, PairKernel::Energy).unwrap();
                black_box(g.gradient(k, &[xv]).unwrap());
            })
        });
    }
    group.finish();
}

fn relaxed_poisson(c: &mut Criterion) {
    let bank = NoiseBank::new(1, 0);
    let mut group = c.benchmark_group("relaxed_poisson_count");
    for tu in [5, 30, 110] {
        let n = 1000;
        let eta = bank.normal(3, n);
        let gumbel = bank.gumbel(4, n * (tu + 1));
        group.bench_with_input(BenchmarkId::from_parameter(tu), &tu, |b, &tu| {
            b.iter(|| {
                let mut g = Graph::new();
                let e = g.input(&[n], eta.clone()).unwrap();
                let family = CountFamily::Poisson { truncation: tu };
                black_box(relaxed_count(&mut g, e, &family, 1.0, &gumbel).unwrap());
            })
        });
    }
    group.finish();
}

fn objective_evaluate(c: &mut Criterion) {
    let mut group = c.benchmark_group("objective_evaluate");
    group.sample_size(10);
    for case in ["case1", "case2", "case4_normal"] {
        let (obj, x, w) = objective(case, 16, 100).unwrap();
        group.bench_function(case, |b| {
            b.iter(|| black_box(obj.evaluate(&x, 0, &w, None, true).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, energy_kernel, relaxed_poisson, objective_evaluate);
criterion_main!(benches);
