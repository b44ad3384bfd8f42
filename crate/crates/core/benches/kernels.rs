//! Parallel vs single-threaded timings of the hot kernels.
//!
//! `threads=1` runs inside a one-thread rayon pool, which executes the same
//! partitioning as the sequential build (`--no-default-features`) without
//! recompiling.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};

use wrnet::dataio::{generate_synthetic, SyntheticSpec};
use wrnet::metrics::ssim;
use wrnet::nn::{Graph, Padding, Tensor};
use wrnet::{estimate_flow, ScalarField, Tvl1Params, WrNetConfig, WrNetModel};

fn pools() -> Vec<(String, ThreadPool)> {
    let n = rayon::current_num_threads().max(2);
    [1, n]
        .into_iter()
        .map(|t| {
            let pool = ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            (format!("threads={t}"), pool)
        })
        .collect()
}

fn random_field(w: usize, h: usize, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bench_tvl1(c: &mut Criterion) {
    let spec = SyntheticSpec {
        width: 128,
        height: 128,
        velocity: (2.5, -1.0),
        ..Default::default()
    };
    let seq = generate_synthetic(&spec, 2).unwrap();
    let params = Tvl1Params::default();
    let mut group = c.benchmark_group("tvl1_128");
    group.sample_size(10);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                pool.install(|| estimate_flow(&seq.frames[0], &seq.frames[1], &params).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = random_tensor(&[4, 16, 64, 64], 1);
    let w = random_tensor(&[16, 16, 3, 3], 2);
    let bias = random_tensor(&[16], 3);
    let mut group = c.benchmark_group("conv2d_3x3_16ch_64");
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::new("forward_backward", label), |b| {
            b.iter(|| {
                pool.install(|| {
                    let g = Graph::<f32>::new();
                    let (xv, wv, bv) = (g.leaf(&x), g.leaf(&w.clone().with_grad()), g.leaf(&bias));
                    let y = g.conv2d(xv, wv, Some(bv), 1, 1, Padding::Zero).unwrap();
                    let loss = g.weighted_sum(y, vec![1.0; 4 * 16 * 64 * 64]).unwrap();
                    g.backward(loss).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let model = WrNetModel::new(WrNetConfig::small(), 0).unwrap();
    let (a, b2, w) = (
        random_field(128, 128, 4),
        random_field(128, 128, 5),
        random_field(128, 128, 6),
    );
    let mut group = c.benchmark_group("wrnet_small_predict_128");
    group.sample_size(20);
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| pool.install(|| model.predict(&a, &b2, &w).unwrap()))
        });
    }
    group.finish();
}

fn bench_ssim(c: &mut Criterion) {
    let (a, b2) = (random_field(256, 256, 7), random_field(256, 256, 8));
    let mut group = c.benchmark_group("ssim_256");
    for (label, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| pool.install(|| ssim(&a, &b2).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_tvl1, bench_conv, bench_model, bench_ssim);
criterion_main!(benches);
