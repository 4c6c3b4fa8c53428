use std::collections::{BTreeMap, BTreeSet};
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vilod_core::detector::{SkillParams, SyntheticDetector};
use vilod_core::evaluation::map_metrics;
use vilod_core::projection::{select_seed_pool, tsne_project, TsneConfig};
use vilod_core::uncertainty::{compute_heatmap, select_al_samples, uncertainty_weight};
use vilod_core::{Detector, Split, TrainConfig};

fn selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: BTreeMap<String, Vec<f64>> = (0..1052)
        .map(|i| {
            let k = rng.gen_range(0..=10);
            (format!("img{i}"), (0..k).map(|_| rng.gen_range(0.0..1.0)).collect())
        })
        .collect();
    let exclude: BTreeSet<String> = (0..70).map(|i| format!("img{}", i * 15)).collect();
    c.bench_function("select_al_samples/1052", |b| {
        b.iter(|| select_al_samples(black_box(&scores), &exclude, 30).unwrap())
    });
}

fn heatmap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords: Vec<[f64; 2]> = (0..1052)
        .map(|_| [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)])
        .collect();
    let weights: Vec<f64> = (0..1052)
        .map(|_| uncertainty_weight(rng.gen_range(0.0..1.0)).unwrap())
        .collect();
    let mut group = c.benchmark_group("heatmap");
    group.sample_size(20);
    for res in [64usize, 128] {
        group.bench_with_input(BenchmarkId::from_parameter(res), &res, |b, &res| {
            b.iter(|| compute_heatmap(black_box(&coords), &weights, res, res).unwrap())
        });
    }
    group.finish();
}

fn projection(c: &mut Criterion) {
    let world = vilod_bench::world(256);
    let pool = world.pool_embeddings();
    let small = pool.subset(&pool.ids()[..300]).unwrap();
    let mut group = c.benchmark_group("projection");
    group.sample_size(10);
    group.bench_function("seed_pool/1052x256", |b| {
        b.iter(|| select_seed_pool(black_box(&pool), 20, 2, 0).unwrap())
    });
    let cfg = TsneConfig {
        iterations: 300,
        ..TsneConfig::default()
    };
    group.bench_function("tsne/300pts/300it", |b| {
        b.iter(|| tsne_project(black_box(&small), &cfg).unwrap())
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let world = vilod_bench::world(8);
    let det = SyntheticDetector::from_registry(&world.registry, SkillParams::default(), 0);
    let manifest = vilod_core::detector::TrainManifest {
        annotations: world
            .registry
            .ids(Split::TrainPool)
            .into_iter()
            .take(100)
            .map(|id| {
                let boxes = world.registry.labels_of(&id).unwrap().to_vec();
                (id, boxes)
            })
            .collect(),
    };
    let model = det
        .train(None, &manifest, &TrainConfig::default(), &mut |_| {})
        .unwrap();
    let test = world.registry.ground_truth(Split::Test);
    let ids: Vec<String> = test.keys().cloned().collect();
    let dets = det.infer(&model, &ids).unwrap();
    c.bench_function("map_metrics/227", |b| {
        b.iter(|| map_metrics(black_box(&dets), &test).unwrap())
    });
    c.bench_function("synthetic_infer/1052", |b| {
        let pool = world.registry.ids(Split::TrainPool);
        b.iter(|| det.infer(&model, black_box(&pool)).unwrap())
    });
}

criterion_group!(benches, selection, heatmap, projection, evaluation);
criterion_main!(benches);
