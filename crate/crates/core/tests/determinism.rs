//! Results must not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use wrnet::dataio::{generate_synthetic, make_triplets, SyntheticSpec, Texture, TripletMode};
use wrnet::metrics::ssim;
use wrnet::model::{prepare_samples, TrainOptions};
use wrnet::nn::AdamConfig;
use wrnet::{estimate_flow, ScalarField, Tvl1Params, WrNetConfig, WrNetModel};

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn bits(f: &ScalarField) -> Vec<u32> {
    f.data().iter().map(|v| v.to_bits()).collect()
}

fn random_field(w: usize, h: usize, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

#[test]
fn flow_is_thread_count_invariant() {
    let spec = SyntheticSpec {
        width: 48,
        height: 40,
        velocity: (1.7, -0.6),
        texture: Texture::AdvectedFractal,
        brightness_drift: 0.01,
        seed: 3,
        ..Default::default()
    };
    let seq = generate_synthetic(&spec, 2).unwrap();
    let run = |n| {
        in_pool(n, || {
            let f = estimate_flow(&seq.frames[0], &seq.frames[1], &Tvl1Params::default()).unwrap();
            (bits(&f.u_field()), bits(&f.v_field()))
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn ssim_is_thread_count_invariant() {
    let (a, b) = (random_field(45, 33, 1), random_field(45, 33, 2));
    let run = |n| in_pool(n, || ssim(&a, &b).unwrap().to_bits());
    assert_eq!(run(1), run(4));
}

#[test]
fn forward_and_training_are_thread_count_invariant() {
    let spec = SyntheticSpec {
        width: 32,
        height: 32,
        velocity: (2.0, 1.0),
        brightness_drift: 0.01,
        seed: 5,
        ..Default::default()
    };
    let seq = generate_synthetic(&spec, 5).unwrap();
    let triplets = make_triplets(&seq, 1, TripletMode::Interpolation).unwrap();
    let opts = TrainOptions {
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        steps: 3,
        batch_size: 2,
        crop: (16, 16),
        seed: 9,
        ..Default::default()
    };
    let (a, b, c) = (
        random_field(24, 20, 6),
        random_field(24, 20, 7),
        random_field(24, 20, 8),
    );
    let run = |n| {
        in_pool(n, || {
            let samples = prepare_samples(
                &triplets,
                TripletMode::Interpolation,
                &Tvl1Params::default(),
            )
            .unwrap();
            let mut m = WrNetModel::new(WrNetConfig::small(), 4).unwrap();
            let losses = m.train_samples(&samples, &opts, |_, _| {}).unwrap();
            let out = m.predict(&a, &b, &c).unwrap();
            (
                losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
                m.fingerprint_hash(),
                bits(&out),
            )
        })
    };
    assert_eq!(run(1), run(4));
}
