//! Hot paths under the active backend. Run once as `cargo bench` and once as
//! `cargo bench --no-default-features`; the ids carry the backend name, so
//! criterion's report shows the rayon and sequential numbers side by side.

use bdkd::augment::{self, AugmentConfig};
use bdkd::boundary::{border_attack_batch, AttackConfig};
use bdkd::curate::Example;
use bdkd::gradcore::{small_cnn, Mode, Model, Tape, Tensor};
use bdkd::{par, shaderforge};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 16;

fn batch(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * 3 * SIZE * SIZE).map(|_| rng.gen::<f32>()).collect();
    Tensor::new(vec![n, 3, SIZE, SIZE], data).unwrap()
}

fn threads_from_env() {
    if let Some(n) = std::env::var("BDKD_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::init_threads(n);
    }
}

fn conv_net(c: &mut Criterion) {
    threads_from_env();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::new([3, SIZE, SIZE], small_cnn(&[16, 32, 64], 10), &mut rng).unwrap();
    let x = batch(64, &mut rng);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let mut g = c.benchmark_group("cnn_batch64");
    g.bench_function(BenchmarkId::new("forward", par::backend()), |b| {
        b.iter(|| model.infer(&x).unwrap())
    });
    g.bench_function(BenchmarkId::new("forward_backward", par::backend()), |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let pass = model.forward(&mut tape, xv, true).unwrap();
            let loss = tape.cross_entropy(pass.logits, &labels).unwrap();
            model.backward(&mut tape, loss, &pass).unwrap();
            model.zero_grad();
        })
    });
    g.finish();
}

fn corpus(c: &mut Criterion) {
    let mut g = c.benchmark_group("shader_corpus");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("render_filter_256", par::backend()), |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            shaderforge::build_corpus(&mut rng, 256, SIZE, SIZE, 12).unwrap()
        })
    });
    g.finish();
}

fn attack(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut teacher = Model::new([3, SIZE, SIZE], small_cnn(&[16, 32, 64], 10), &mut rng).unwrap();
    teacher.set_mode(Mode::Eval);
    let images = batch(64, &mut rng).unstack();
    let items: Vec<(&Tensor, usize)> = images.iter().enumerate().map(|(i, x)| (x, i % 10)).collect();
    let cfg = AttackConfig::default();
    let mut g = c.benchmark_group("boundary");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("border_attack_64", par::backend()), |b| {
        b.iter(|| border_attack_batch(&teacher, &items, &cfg, false, &mut ChaCha8Rng::seed_from_u64(4)).unwrap())
    });
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let examples: Vec<Example> = batch(64, &mut rng)
        .unstack()
        .into_iter()
        .enumerate()
        .map(|(i, image)| Example {
            image,
            target: i % 10,
            provenance: i,
            teacher_pred: (i + 1) % 10,
        })
        .collect();
    let cfg = AugmentConfig::default();
    c.bench_function(&format!("augment_batch64/{}", par::backend()), |b| {
        b.iter(|| augment::augment_batch(&examples, &cfg, 9))
    });
}

criterion_group!(benches, conv_net, corpus, attack, augmentation);
criterion_main!(benches);
