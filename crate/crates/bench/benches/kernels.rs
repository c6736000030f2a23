use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sceneseg_bench::random_tensor;
use sceneseg_core::losses::{assign_pseudo_labels, clustering_loss, contrastive_loss};
use sceneseg_core::ops::{conv2d, Backward, Mode};
use sceneseg_core::segnet::{forward, FEATURE_CHANNELS};
use sceneseg_core::trainer::{sgd_update, Velocity};
use sceneseg_core::ModelParams;

fn conv(c: &mut Criterion) {
    let x = random_tensor([2, FEATURE_CHANNELS, 32, 32], 1);
    let w = random_tensor([FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 3], 2);
    let bias = vec![0.0; FEATURE_CHANNELS];
    let mut group = c.benchmark_group("conv2d_64x64_3x3_2x32x32");
    group.bench_function("forward", |b| b.iter(|| conv2d(black_box(&x), &w, &bias, 1).unwrap()));
    let pair = conv2d(&x, &w, &bias, 1).unwrap();
    let up = random_tensor(pair.value.shape(), 3);
    group.bench_function("backward", |b| b.iter(|| pair.backward.backward(black_box(&up)).unwrap()));
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let batch = random_tensor([4, 3, 32, 32], 4);
    let perm = [1, 2, 3, 0];
    c.bench_function("train_step_4x3x32x32", |b| {
        b.iter_batched(
            || {
                let p = ModelParams::init(0, 3, 8, 8).unwrap();
                let v = Velocity::zeros_like(&p);
                (p, v)
            },
            |(mut params, mut velocity)| {
                let pass = forward(&params, &batch, Mode::Train).unwrap();
                let labels = assign_pseudo_labels(&pass.features);
                let mut grad = clustering_loss(&pass.features, &labels).unwrap().grad;
                grad.add_assign(&contrastive_loss(&pass.features, &perm).unwrap().grad);
                let (grads, _) = pass.trace.backward(&grad).unwrap();
                sgd_update(&mut params, &grads, 0.1, 0.9, &mut velocity).unwrap();
                params
            },
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, train_step
}
criterion_main!(benches);
