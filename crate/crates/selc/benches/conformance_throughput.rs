//! Conformance batch throughput: the same generated-term suite run on the
//! rayon work-stealing pool (the `parallel` feature's default path) and
//! strictly sequentially. Cases are independent, so the parallel path
//! scales with cores; on a single-core host the two land together.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use selc::conform::{run_fuzz, ConformParams, FuzzConfig, FuzzStage};

fn batch_config(count: usize, parallel: bool) -> FuzzConfig {
    FuzzConfig {
        seed0: 7,
        count,
        size: 18,
        params: ConformParams { fuel: 200_000, ..ConformParams::default() },
        stages: vec![FuzzStage::Machine, FuzzStage::StepSoundness, FuzzStage::EvalAndGiant],
        parallel,
    }
}

fn bench_conformance(c: &mut Criterion) {
    let mut group = c.benchmark_group("conformance_batch");
    group.sample_size(10);
    for count in [64usize, 256] {
        group.bench_with_input(BenchmarkId::new("sequential", count), &count, |b, &n| {
            b.iter(|| {
                let report = run_fuzz(&batch_config(n, false));
                assert!(report.failures.is_empty());
                report.cases
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", count), &count, |b, &n| {
            b.iter(|| {
                let report = run_fuzz(&batch_config(n, true));
                assert!(report.failures.is_empty());
                report.cases
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conformance);
criterion_main!(benches);
