use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use refseg_core::dataset::{generate_dataset, GeneratedDataset, SynthConfig};
use refseg_core::metrics::iou;
use refseg_core::model::{GradientOptions, Model, ModelConfig, Paths};
use refseg_core::segment::fusion::coverage_grid;
use refseg_core::synth::rng_from_seed;
use refseg_core::{fuse, tokenize, ClassDistribution, ProbabilityMap};

fn setup() -> (GeneratedDataset, Model) {
    let data = generate_dataset(&SynthConfig {
        seed: 1,
        count: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = Model::new(
        ModelConfig::default(),
        Paths::Full,
        Arc::new(data.vectors.clone()),
        false,
        &mut rng_from_seed(2),
    )
    .unwrap();
    (data, model)
}

fn model_benches(c: &mut Criterion) {
    let (data, model) = setup();
    let sample = &data.referring[0];
    let seq = tokenize(&sample.expression).unwrap();
    c.bench_function("predict 45x45", |b| {
        b.iter(|| {
            model
                .predict_tokens(black_box(&sample.image), &seq)
                .unwrap()
        })
    });
    let target = coverage_grid(&sample.gt_mask, 12, 12, 2);
    let options = GradientOptions::default();
    c.bench_function("example gradients 45x45", |b| {
        b.iter(|| {
            model
                .example_gradients(
                    &sample.image,
                    &seq,
                    black_box(&target),
                    sample.class_label,
                    &options,
                )
                .unwrap()
        })
    });
}

fn map_benches(c: &mut Criterion) {
    let m = 9;
    let cells = 12 * 12;
    let pmap = ProbabilityMap::new(12, 12, m, vec![1.0 / m as f64; cells * m]).unwrap();
    let text = ClassDistribution::uniform(m);
    c.bench_function("fuse 12x12x9", |b| {
        b.iter(|| fuse(black_box(&pmap), &text).unwrap())
    });

    let (data, _) = setup();
    let (a, g) = (&data.referring[0].gt_mask, &data.referring[1].gt_mask);
    c.bench_function("iou 45x45", |b| b.iter(|| iou(black_box(a), g).unwrap()));

    c.bench_function("nearest neighbours", |b| {
        b.iter(|| {
            data.vectors
                .nearest_neighbors(black_box("circle"), 5)
                .unwrap()
        })
    });
}

criterion_group!(benches, model_benches, map_benches);
criterion_main!(benches);
