use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gridroad_bench::{model_config, setup};
use gridroad_core::data::{MapMatcher, MatchConfig, Sample};
use gridroad_core::math::{Graph, Tensor};
use gridroad_core::model::{make_batch, train_step, MaskSettings, Model, TrainState};

fn matmul(c: &mut Criterion) {
    let a = Tensor::from_fn([128, 256], |i| (i % 7) as f64 * 0.1);
    let b = Tensor::from_fn([256, 128], |i| (i % 5) as f64 * 0.1);
    c.bench_function("matmul 128x256x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn map_matching(c: &mut Criterion) {
    let s = setup(50, 1);
    let matcher = MapMatcher::new(&s.world.network, MatchConfig::default());
    c.bench_function("map match 50 trajectories", |bench| {
        bench.iter(|| {
            for t in &s.world.trajectories {
                let _ = black_box(matcher.map_match(t, 0));
            }
        })
    });
}

fn training(c: &mut Criterion) {
    let s = setup(200, 2);
    let rows: Vec<&Sample> = s.samples.iter().take(16).collect();
    let mut model = Model::new(model_config(32, s.origin), &s.ctx, 0).unwrap();
    let batch = make_batch(&rows, &s.ctx, s.origin, Some(MaskSettings { ratio: 0.2, span: 2, seed: 0 })).unwrap();
    let mut state = TrainState::new(&model, 2e-4, 0);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("train step d=32 batch=16", |bench| {
        bench.iter(|| black_box(train_step(&mut model, &s.ctx, &batch, &mut state, 1.0).unwrap()))
    });
    let all: Vec<&Sample> = s.samples.iter().take(64).collect();
    group.bench_function("encode 64 trajectories d=32", |bench| bench.iter(|| black_box(model.encode(&s.ctx, &all, 64).unwrap())));
    group.finish();
}

criterion_group!(benches, matmul, map_matching, training);
criterion_main!(benches);
