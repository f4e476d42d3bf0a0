//! Ensemble throughput: sequential vs data-parallel chain scheduling.

use std::hint::black_box;

use agld::access::AccessKind;
use agld::model::{make_quadratic, QuadraticSpec};
use agld::sampler::{run_ensemble, Execution, Method, SamplerConfig};
use agld::snapshot::UpdaterKind;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn ensemble(c: &mut Criterion) {
    let model = make_quadratic(&QuadraticSpec::sampled(100, 10, 0.5, 40.0, 0)).unwrap();
    let methods = [
        Method::Lmc,
        Method::Sgld { access: AccessKind::Random },
        Method::Agld { access: AccessKind::Random, updater: UpdaterKind::Ppu },
        Method::Agld { access: AccessKind::Cyclic, updater: UpdaterKind::Tmu },
    ];
    let mut group = c.benchmark_group("ensemble_64_chains");
    group.sample_size(10);
    for method in methods {
        let mut cfg = SamplerConfig::new(method, 1e-4, 200);
        cfg.batch = 10;
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, method), &cfg, |b, cfg| {
                b.iter(|| black_box(run_ensemble(cfg, &model, 64, exec).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, ensemble);
criterion_main!(benches);
