//! Single-thread versus thread-pool timings of the main kernels.
//!
//! Built without the `parallel` feature, both rows run the sequential loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speednet_core::model::{SpeedNet, SpeedNetConfig};
use speednet_core::ops::{self, ConvGeometry, ConvSpec, InvolutionGeometry};
use speednet_core::parallel::with_threads;
use speednet_core::{Shape4, Tensor4};

fn random(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f32> {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pools() -> [(&'static str, usize); 2] {
    [("1-thread", 1), ("pool", std::thread::available_parallelism().map_or(1, |n| n.get()))]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, Shape4::new(4, 32, 56, 56));
    let kernel = random(&mut rng, Shape4::new(32, 32, 3, 3));
    let bias = vec![0.0f32; 32];
    let spec = ConvSpec {
        kernel: &kernel,
        bias: &bias,
        geometry: ConvGeometry {
            stride: 1,
            dilation: 2,
            padding: 2,
        },
    };
    let grad = random(&mut rng, Shape4::new(4, 32, 56, 56));
    let mut group = c.benchmark_group("conv2d 4x32x56x56 k3 d2");
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::new("forward", label), |b| {
            b.iter(|| with_threads(threads, || ops::conv2d(&x, &spec).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", label), |b| {
            b.iter(|| with_threads(threads, || ops::conv2d_backward(&x, &spec, &grad).unwrap()))
        });
    }
    group.finish();
}

fn involution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geom = InvolutionGeometry {
        kernel_size: 7,
        groups: 2,
        stride: 1,
        dilation: 2,
    };
    let x = random(&mut rng, Shape4::new(4, 32, 56, 56));
    let kernels = random(&mut rng, Shape4::new(4, 2 * 49, 56, 56));
    let grad = random(&mut rng, Shape4::new(4, 32, 56, 56));
    let mut group = c.benchmark_group("involution2d 4x32x56x56 k7 g2 d2");
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::new("forward", label), |b| {
            b.iter(|| with_threads(threads, || ops::involution2d(&x, &kernels, geom).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", label), |b| {
            b.iter(|| with_threads(threads, || ops::involution2d_backward(&x, &kernels, geom, &grad).unwrap()))
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = SpeedNet::<f32>::new(SpeedNetConfig::toy(64)).unwrap();
    let x = Tensor4::from_fn(Shape4::new(4, 3, 64, 64), |_| rng.random_range(0.0..1.0));
    let mut group = c.benchmark_group("toy model 4x3x64x64");
    group.sample_size(10);
    for (label, threads) in pools() {
        group.bench_function(BenchmarkId::new("forward+backward", label), |b| {
            b.iter(|| {
                with_threads(threads, || {
                    let (out, cache) = net.forward_train(&x).unwrap();
                    let grad = Tensor4::from_fn(out.shape(), |_| 1.0 / out.len() as f32);
                    net.backward(&cache, &grad).unwrap();
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, involution, model);
criterion_main!(benches);
