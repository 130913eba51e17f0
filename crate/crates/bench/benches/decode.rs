use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use narem::decode::{beam_search, constrained_viterbi, odd_decode, LengthMode};
use narem::model::LogProbMatrix;
use narem::substrate::Matrix;
use narem_bench::model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unary(t: usize, v: usize, seed: u64) -> LogProbMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Matrix::from_fn(t, v, |_, _| rng.gen_range(-4.0..4.0));
    LogProbMatrix::from_logits(&logits)
}

fn crf(c: &mut Criterion) {
    let mut g = c.benchmark_group("crf");
    for v in [10usize, 1000, 30000] {
        let u = unary(50, v, 1);
        g.bench_with_input(BenchmarkId::new("odd_decode", v), &u, |b, u| {
            b.iter(|| odd_decode(black_box(u)).unwrap())
        });
    }
    let u = unary(50, 200, 2);
    g.bench_function("constrained_viterbi/200", |b| {
        b.iter(|| constrained_viterbi(black_box(&u)).unwrap())
    });
    g.finish();
}

fn beam(c: &mut Criterion) {
    let m = model(true, 64, 2);
    let x: Vec<u32> = (0..8).map(|i| 5 + i % 5).collect();
    let mut g = c.benchmark_group("beam_search");
    g.sample_size(10);
    for width in [1usize, 5, 20] {
        g.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, &w| {
            b.iter(|| beam_search(&m, black_box(&x), w, LengthMode::Forced(24)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, crf, beam);
criterion_main!(benches);
