use aplsam_core::episodes::{default_classes, generate_synthetic, Episode, SyntheticConfig};
use aplsam_core::fft::fft2;
use aplsam_core::training::train::episode_gradients;
use aplsam_core::{Binder, Graph, Model, ModelConfig, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn ramp(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 37) % 101) as f64 / 101.0 - 0.5)
}

fn matmul(c: &mut Criterion) {
    let g = Graph::new();
    let a = g.constant(ramp(&[64, 64])).unwrap();
    let b = g.constant(ramp(&[64, 256])).unwrap();
    c.bench_function("matmul 64x64x256", |bench| {
        bench.iter(|| black_box(g.matmul(a, b).unwrap()))
    });
}

fn fft(c: &mut Criterion) {
    let x = ramp(&[64, 64]);
    c.bench_function("fft2 64x64", |b| b.iter(|| fft2(black_box(&x)).unwrap()));
}

fn episode() -> Episode {
    let cfg = SyntheticConfig::default();
    let class = &default_classes()[1];
    let s = generate_synthetic(&cfg, class, 1).unwrap();
    let q = generate_synthetic(&cfg, class, 2).unwrap();
    Episode {
        class: class.name.clone(),
        support_image: s.image.reshape(&[1, 64, 64]).unwrap(),
        support_mask: s.mask,
        query_image: q.image.reshape(&[1, 64, 64]).unwrap(),
        query_gt: q.mask,
        support_index: 0,
        query_index: 1,
    }
}

fn model_paths(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let ep = episode();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("encode 64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            let binder = Binder::new(&g, &model.params);
            let f = model.encoder().encode(&binder, &ep.query_image).unwrap();
            let total = g.value(f.levels[3]).sum();
            black_box(total)
        })
    });
    group.bench_function("training step gradients", |b| {
        b.iter(|| black_box(episode_gradients(&model, &ep, None).unwrap().0))
    });
    group.finish();
}

criterion_group!(benches, matmul, fft, model_paths);
criterion_main!(benches);
