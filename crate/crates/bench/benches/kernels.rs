use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use defrec::chamfer::{chamfer_distance, chamfer_loss_region};
use defrec::cloud::farthest_point_sample;
use defrec::deform::{deform, DeformKind, DeformSpec};
use defrec::network::{Mode, ModelParams, NetworkConfig, OutputGrads, Task};
use defrec::NeighborIndex;
use defrec_bench::spiral_cloud;

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    for n in [256, 1024, 4096] {
        let cloud = spiral_cloud(n, 0.0);
        let index = NeighborIndex::new(cloud.points().to_vec());
        group.bench_with_input(BenchmarkId::new("k10_all_points", n), &n, |b, _| {
            b.iter(|| {
                for p in cloud.points() {
                    black_box(index.knn(*p, 10));
                }
            })
        });
    }
    group.finish();
}

fn chamfer(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [256, 1024, 2048] {
        let (a, b) = (spiral_cloud(n, 0.0), spiral_cloud(n, 0.3));
        group.bench_with_input(BenchmarkId::new("distance", n), &n, |bench, _| {
            bench.iter(|| black_box(chamfer_distance(a.points(), b.points()).unwrap()))
        });
        let region: Vec<usize> = (0..n).step_by(4).collect();
        group.bench_with_input(BenchmarkId::new("region_loss_quarter", n), &n, |bench, _| {
            bench.iter(|| black_box(chamfer_loss_region(&a, &b, &region).unwrap()))
        });
    }
    group.finish();
}

fn fps(c: &mut Criterion) {
    let mut group = c.benchmark_group("farthest_point_sample");
    for (n, m) in [(1024, 256), (4096, 1024)] {
        let cloud = spiral_cloud(n, 0.0);
        group.bench_with_input(BenchmarkId::new(format!("{n}_to"), m), &m, |b, &m| {
            b.iter(|| black_box(farthest_point_sample(&cloud, m, 1).unwrap()))
        });
    }
    group.finish();
}

fn deformations(c: &mut Criterion) {
    let cloud = spiral_cloud(1024, 0.0);
    let mut group = c.benchmark_group("deform_1024");
    for (name, kind) in [
        ("voxel_k3", DeformKind::VoxelGrid { k: 3 }),
        ("sphere_r0.2", DeformKind::Sphere { r: 0.2 }),
        ("lambertian", DeformKind::SampleLambertian),
    ] {
        let spec = DeformSpec::new(kind);
        group.bench_function(name, |b| b.iter(|| black_box(deform(&cloud, &spec, None, 9).unwrap())));
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(20);
    for (name, config) in [
        ("compact", NetworkConfig::compact(Task::Classification, 10)),
        ("reference", NetworkConfig::reference(Task::Classification, 10)),
    ] {
        let params = ModelParams::init(config, 3).unwrap();
        let cloud = spiral_cloud(1024, 0.0);
        group.bench_function(format!("{name}_forward_sup_ssl_1024"), |b| {
            b.iter(|| black_box(params.forward(&cloud, Some(Mode::Train { seed: 1 }), true).unwrap()))
        });
        let trace = params.forward(&cloud, Some(Mode::Train { seed: 1 }), true).unwrap();
        let upstream = OutputGrads {
            sup: Some(vec![0.1; 10]),
            ssl: Some(vec![0.01; 3 * 1024]),
        };
        group.bench_function(format!("{name}_backward_1024"), |b| {
            b.iter(|| black_box(params.backward(&trace, &upstream).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, knn, chamfer, fps, deformations, network);
criterion_main!(benches);
