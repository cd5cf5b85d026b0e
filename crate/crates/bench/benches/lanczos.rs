use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dho2_bench::spiked_quadratic;
use dho2_core::oracle::{Batch, Oracle};
use dho2_core::{extract_ese, lanczos_single, run_distributed_ese, LanczosOptions, WorkerGroup};
use std::hint::black_box;

fn lanczos(c: &mut Criterion) {
    let n = 400;
    let m = 40;
    let q = spiked_quadratic(n);
    let zero = vec![0.0; n];
    let batch = Batch::empty();
    let hvp = |v: &[f64]| q.hvp(&zero, v, &batch);
    let opts = LanczosOptions::default();

    let mut g = c.benchmark_group("ese_n400_m40");
    g.sample_size(20);
    g.bench_function("single", |b| {
        b.iter(|| {
            let state = lanczos_single(n, m, &hvp, 3, &opts).unwrap();
            black_box(extract_ese(&state, 8, 0).unwrap())
        })
    });
    for workers in [1, 2, 4] {
        let group = WorkerGroup::new(workers).unwrap();
        g.bench_with_input(BenchmarkId::new("distributed", workers), &workers, |b, _| {
            b.iter(|| black_box(run_distributed_ese(&group, n, m, &hvp, 3, 8, 0, &opts).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, lanczos);
criterion_main!(benches);
