use std::hint::black_box;

use actembed::dataset::segment;
use actembed::features::{extract_all, feature_names};
use actembed::neighbors::feature_neighbors;
use actembed::synth::generate;
use actembed::training::{TrainData, Trainer};
use actembed::{kmeans, prepare, Points, PrepareOptions, Prepared, SynthConfig, TrainConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn synth() -> SynthConfig {
    SynthConfig {
        classes: 5,
        subjects: 2,
        seconds_per_subject: 300.0,
        seed: 9,
        ..SynthConfig::default()
    }
}

fn prepared() -> Prepared {
    let streams = generate(&synth()).unwrap();
    prepare(&streams, &PrepareOptions::default()).unwrap()
}

fn features(c: &mut Criterion) {
    let streams = generate(&synth()).unwrap();
    let segments = segment(&streams[0], 0, 2.0, 1.0).unwrap().segments;
    c.bench_function("extract_features", |b| b.iter(|| extract_all(black_box(&segments)).unwrap()));
    let names: Vec<String> = synth().channel_names();
    assert_eq!(extract_all(&segments).unwrap()[0].dim(), feature_names(&names).len());
}

fn knn(c: &mut Criterion) {
    let p = prepared();
    c.bench_function(&format!("feature_knn_{}", p.len()), |b| {
        b.iter(|| feature_neighbors(black_box(&p.raw), 5).unwrap())
    });
}

fn training_epoch(c: &mut Criterion) {
    let p = prepared();
    let config = TrainConfig {
        max_epochs: 1,
        hidden: vec![32],
        embedding_dim: 8,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(TrainData::new(&p.features, &p.neighbors).unwrap(), &config).unwrap();
    c.bench_function("stage1_epoch", |b| {
        b.iter_batched(
            || trainer.start_stage1().unwrap(),
            |mut state| trainer.run(&mut state, None, Some(1), &mut |_| {}).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn clustering(c: &mut Criterion) {
    let p = prepared();
    let dim = 8;
    let flat: Vec<f64> = p.features.iter().flat_map(|f| f[..dim].iter().copied()).collect();
    let points = Points::new(&flat, dim).unwrap();
    c.bench_function("kmeans_k5_10_restarts", |b| b.iter(|| kmeans(black_box(points), 5, 1, 10).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = features, knn, training_epoch, clustering
}
criterion_main!(benches);
