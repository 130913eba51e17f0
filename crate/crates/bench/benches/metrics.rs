use criterion::{black_box, criterion_group, criterion_main, Criterion};
use narem::train::bleu;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(10..40);
            (0..len).map(|_| rng.gen_range(0..50)).collect()
        })
        .collect()
}

fn bench_bleu(c: &mut Criterion) {
    let hyp = corpus(1000, 1);
    let reference = corpus(1000, 2);
    c.bench_function("bleu/1000", |b| {
        b.iter(|| bleu(black_box(&hyp), black_box(&reference)).unwrap())
    });
}

criterion_group!(benches, bench_bleu);
criterion_main!(benches);
