use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use imexpeer::experiments::{run_experiment, ExperimentKind, ExperimentSpec};
use imexpeer::methods::{builtin, builtins};
use imexpeer::stability::{scan_region, Grid, RegionKind, SectorSampling};
use imexpeer::Execution;
use std::hint::black_box;

const POLICIES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn region_scan(c: &mut Criterion) {
    let tab = builtin("imex-peer3s").unwrap();
    let grid = Grid::with_resolution(60, 60);
    let sampling = SectorSampling::default();
    let mut g = c.benchmark_group("scan_region_60x60");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        for (kind_name, kind) in [
            ("explicit", RegionKind::Explicit),
            ("alpha90", RegionKind::Alpha(90.0)),
        ] {
            g.bench_with_input(BenchmarkId::new(name, kind_name), &kind, |b, &kind| {
                b.iter(|| black_box(scan_region(&tab, grid, kind, &sampling, exec).unwrap()))
            });
        }
    }
    g.finish();
}

fn pr_sweep(c: &mut Criterion) {
    let spec = ExperimentSpec::new(ExperimentKind::ProtheroRobinson, builtins());
    let mut g = c.benchmark_group("prothero_robinson_ladder");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| {
            b.iter(|| black_box(run_experiment(&spec, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, region_scan, pr_sweep);
criterion_main!(benches);
