use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use microattn::eval::confusion;
use microattn::tensor::kernels::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeometry};
use microattn::training::{train_step, OptimState};
use microattn::{InputShape, Model, NetworkSpec, Tensor};

fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for size in [16usize, 32] {
        let g = ConvGeometry::new([8, 8, size, size], [8, 8, 3, 3], 1, 1).unwrap();
        let x = random(8 * 8 * size * size, &mut rng);
        let w = random(8 * 8 * 9, &mut rng);
        let b = random(8, &mut rng);
        let dout = random(g.output_len(), &mut rng);
        group.bench_with_input(BenchmarkId::new("forward", size), &size, |bench, _| {
            bench.iter(|| conv2d_forward(&g, black_box(&x), black_box(&w), Some(&b)))
        });
        group.bench_with_input(BenchmarkId::new("backward", size), &size, |bench, _| {
            bench.iter(|| {
                (
                    conv2d_backward_input(&g, black_box(&dout), black_box(&w)),
                    conv2d_backward_weight(&g, black_box(&dout), black_box(&x)),
                )
            })
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = NetworkSpec::uniform(InputShape { channels: 3, height: 32, width: 32 }, 2, 4, 8, 5);
    let mut model = Model::build(&spec, 3).unwrap();
    model.randomize_attention(0.1, &mut rng).unwrap();
    let x = Tensor::uniform(&[10, 3, 32, 32], -1.0, 1.0, &mut rng).unwrap();
    let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();

    let mut group = c.benchmark_group("network_4x8_32px_batch10");
    group.sample_size(20);
    group.bench_function("forward", |b| b.iter(|| model.forward(black_box(&x)).unwrap()));
    group.bench_function("train_step", |b| {
        let mut m = model.clone();
        let mut state = OptimState::zeros_like(m.params().into_iter().map(|(_, t)| t));
        b.iter(|| train_step(&mut m, &mut state, black_box(&x), &labels, 1e-6, 0.9, 0.0, None).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
    let actual: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..5)).collect();
    let predicted: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..5)).collect();
    c.bench_function("confusion_and_metrics_10k", |b| {
        b.iter(|| {
            let cm = confusion(black_box(&predicted), black_box(&actual), &names).unwrap();
            (cm.war().unwrap(), cm.uar().unwrap(), cm.macro_f1().unwrap())
        })
    });
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);
