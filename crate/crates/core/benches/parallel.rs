//! Parallel vs sequential throughput for the two rayon-backed hot paths:
//! synthetic tile generation and extra-trees fitting.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use oceanfm::par::{map_indexed, map_indexed_seq};
use oceanfm::synth::{gen_labeled_dataset, gen_tile, SynthConfig};
use oceanfm::tile::TargetKind;
use oceanfm::trees::{extract_dataset, fit_trees};

fn bench_tile_generation(c: &mut Criterion) {
    let cfg = SynthConfig::new(7, 4, 45);
    let mut group = c.benchmark_group("gen_tiles_64");
    group.bench_function(BenchmarkId::new("parallel", 64), |b| {
        b.iter(|| map_indexed(64, |i| gen_tile(&cfg, i as u64)))
    });
    group.bench_function(BenchmarkId::new("sequential", 64), |b| {
        b.iter(|| map_indexed_seq(64, |i| gen_tile(&cfg, i as u64)))
    });
    group.finish();
}

fn bench_tree_fitting(c: &mut Criterion) {
    let cfg = SynthConfig::new(11, 2, 45);
    let ds = gen_labeled_dataset(&cfg, 40, TargetKind::Chlorophyll).unwrap();
    let (rows, _) = extract_dataset(&ds).unwrap();
    let mut group = c.benchmark_group("fit_trees_50");
    group.sample_size(10);
    // fit_trees itself uses map_indexed over trees; toggle via feature builds.
    group.bench_function("current_features", |b| b.iter(|| fit_trees(&rows, 50, 3).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_tile_generation, bench_tree_fitting);
criterion_main!(benches);
