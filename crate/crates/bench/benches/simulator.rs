use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use leap_core::experiments::{cpu_adjust, dl_batch, mem_query, DL_IMAGES, MEM_FILES_MB};
use leap_core::explore::ExploreConfig;
use leap_core::{check_invariants, explore, random_scenario, Defenses, MetricsReport};

fn scenarios(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    for events in [50, 200] {
        let s = random_scenario(7, events);
        g.bench_with_input(BenchmarkId::new("run_checked", events), &s, |b, s| {
            b.iter(|| {
                let mut cfg = s.world_config();
                cfg.trace = false;
                black_box(s.run_with(cfg).unwrap())
            })
        });
        g.bench_with_input(BenchmarkId::new("run_traced", events), &s, |b, s| {
            b.iter(|| MetricsReport::from_world(&s.run().unwrap()))
        });
    }
    g.finish();

    let w = random_scenario(7, 200).run().unwrap();
    c.bench_function("check_invariants", |b| {
        b.iter(|| check_invariants(black_box(&w)))
    });
}

fn exploration(c: &mut Criterion) {
    let mut g = c.benchmark_group("explore");
    g.sample_size(10);
    for depth in [4, 6] {
        let cfg = ExploreConfig::small(Defenses::default(), depth);
        g.bench_with_input(BenchmarkId::from_parameter(depth), &cfg, |b, cfg| {
            b.iter(|| explore(cfg).unwrap())
        });
    }
    g.finish();
}

fn experiments(c: &mut Criterion) {
    let mut g = c.benchmark_group("experiments");
    g.sample_size(10);
    g.bench_function("cpu_adjust", |b| b.iter(|| cpu_adjust().unwrap()));
    g.bench_function("dl_batch", |b| {
        b.iter(|| dl_batch(&DL_IMAGES, &[1, 2]).unwrap())
    });
    g.bench_function("mem_query", |b| {
        b.iter(|| mem_query(&MEM_FILES_MB, &[50, 100]).unwrap())
    });
    g.finish();
}

criterion_group!(benches, scenarios, exploration, experiments);
criterion_main!(benches);
