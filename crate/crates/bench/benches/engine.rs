use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sttl_core::network::{build_graph, init_parameters, HiddenState, NetworkConfig, ParamVars};
use sttl_core::salient::{canny, CannyConfig};
use sttl_core::similarity::{fid, ssim, FeatureSource, FeatureVector};
use sttl_core::synthdata::{generate_dataset, town_a};
use sttl_core::tensor::{Tape, Tensor};

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>()).collect()
}

fn conv(c: &mut Criterion) {
    let input = Tensor::new(vec![15, 16, 24, 32], noise(15 * 16 * 24 * 32, 1)).unwrap();
    let kernel = Tensor::new(vec![32, 16, 3, 3], noise(32 * 16 * 9, 2)).unwrap();
    c.bench_function("conv2d 15x16x24x32 -> 32, fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let k = tape.param(kernel.clone());
            let bias = tape.param(Tensor::zeros(&[32]));
            let y = tape.conv2d(x, k, bias, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = NetworkConfig::toy(24, 32, 15);
    let params = init_parameters(&cfg, 1).unwrap();
    let n = 4;
    let input = Tensor::new(vec![n * 15, 3, 24, 32], noise(n * 15 * 3 * 24 * 32, 3)).unwrap();
    let h0 = HiddenState::zeros(cfg.lstm_layers, cfg.lstm_hidden);
    c.bench_function("network fwd+bwd, 4 sequences of 15 frames", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, &params, true);
            let x = tape.constant(input.clone());
            let g = build_graph(&mut tape, &cfg, &pv, x, n, &h0).unwrap();
            let loss = tape.cross_entropy(g.logits, &[0, 1, 0, 1]).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn edges(c: &mut Criterion) {
    let frame = noise(96 * 128, 4);
    let cfg = CannyConfig::default();
    c.bench_function("canny 96x128", |b| b.iter(|| canny(&frame, 96, 128, &cfg).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let (x, y) = (noise(24 * 32, 5), noise(24 * 32, 6));
    c.bench_function("ssim 24x32", |b| b.iter(|| ssim(&x, &y, 24, 32).unwrap()));

    let vecs = |seed| -> Vec<FeatureVector> {
        let flat = noise(300 * 64, seed);
        flat.chunks(64)
            .map(|v| FeatureVector::new(v.to_vec(), FeatureSource::Inception, "bench"))
            .collect()
    };
    let (a, b2) = (vecs(7), vecs(8));
    c.bench_function("fid 300x64 vs 300x64", |b| b.iter(|| fid(&a, &b2).unwrap()));
}

fn data(c: &mut Criterion) {
    let spec = town_a().with_size(24, 32);
    c.bench_function("generate 16 sequences of 15 frames", |b| {
        b.iter_batched(
            || spec.clone(),
            |s| generate_dataset(&s, 16, 0.5, 15, 9).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, train_step, edges, metrics, data
}
criterion_main!(benches);
