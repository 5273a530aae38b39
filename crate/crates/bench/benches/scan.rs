use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use xyscan_bench::random_coeffs;
use xyscan_core::scan::{scan_parallel, scan_sequential};

fn bench_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear-recurrence");
    for len in [4_096usize, 65_536] {
        let (a, b) = random_coeffs(len, 42);
        group.bench_with_input(BenchmarkId::new("sequential", len), &len, |bench, _| {
            bench.iter(|| scan_sequential(black_box(&a), black_box(&b), 0.0).unwrap())
        });
        for chunk in [64usize, 1024] {
            group.bench_with_input(
                BenchmarkId::new(format!("parallel-chunk{chunk}"), len),
                &len,
                |bench, _| {
                    bench.iter(|| scan_parallel(black_box(&a), black_box(&b), 0.0, chunk).unwrap())
                },
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench_scan);
criterion_main!(benches);
