//! Rayon pool against a single-thread pool on the hot paths.
//!
//! `cargo bench -p textrec-core` compares the two pools in one build.
//! `cargo bench -p textrec-core --no-default-features` measures the
//! sequential fallback with rayon compiled out.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textrec_core::config::ModelConfig;
use textrec_core::encoder::TextImage;
use textrec_core::numerics::{no_grad, Tensor};
use textrec_core::recognizer::Recognizer;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn image(rng: &mut ChaCha8Rng) -> TextImage {
    let mut img = TextImage::blank(16, 64);
    img.pixels.iter_mut().for_each(|p| *p = rng.random());
    img
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    vec![
        ("rayon", rayon::ThreadPoolBuilder::new().num_threads(all).build().unwrap()),
        ("single", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

#[cfg(feature = "parallel")]
fn in_pool<R: Send>(pool: &rayon::ThreadPool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
struct Inline;

#[cfg(not(feature = "parallel"))]
fn pools() -> Vec<(&'static str, Inline)> {
    vec![("sequential", Inline)]
}

#[cfg(not(feature = "parallel"))]
fn in_pool<R>(_: &Inline, f: impl FnOnce() -> R) -> R {
    f()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, &[16, 128, 64]);
    let b = random(&mut rng, &[16, 64, 128]);
    let mut group = c.benchmark_group("batched_matmul");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| in_pool(&pool, || a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Recognizer::<f32>::new(&ModelConfig::desk()).unwrap();
    let imgs: Vec<TextImage> = (0..8).map(|_| image(&mut rng)).collect();
    let refs: Vec<&TextImage> = imgs.iter().collect();
    let x = model.prepare_images(&refs).unwrap();
    let labels: Vec<Vec<usize>> = (0..8).map(|i| vec![3 + i % 10; 1 + i % 6]).collect();
    let mut group = c.benchmark_group("forward_train_batch8");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                in_pool(&pool, || {
                    let _g = no_grad();
                    model.forward_train(&x, &labels).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Recognizer::<f32>::new(&ModelConfig::desk()).unwrap();
    let img = image(&mut rng);
    let mut group = c.benchmark_group("beam10_decode");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| in_pool(&pool, || model.decode_beam(&img, 10).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, forward, decode);
criterion_main!(benches);
