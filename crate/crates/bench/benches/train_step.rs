use criterion::{criterion_group, criterion_main, Criterion};
use narem::corpus::gen_exp1;
use narem::substrate::{AdamConfig, AdamState, Graph};
use narem::TokenId;
use narem_bench::model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn step(c: &mut Criterion) {
    let corpus = gen_exp1(32, 8, 1).unwrap();
    let batch: Vec<(&[TokenId], &[TokenId])> = corpus
        .pairs()
        .iter()
        .map(|(x, y)| (x.tokens(), y.tokens()))
        .collect();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for ar in [true, false] {
        let mut m = model(ar, 64, 2);
        let mut adam = AdamState::new(AdamConfig::default(), m.params());
        let name = if ar { "ar/d64x2/b32" } else { "nar/d64x2/b32" };
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut graph = Graph::training(ChaCha8Rng::seed_from_u64(0));
                let loss = if ar {
                    m.ar_loss(&mut graph, &batch, 0.1).unwrap()
                } else {
                    m.nar_loss(&mut graph, &batch, 0.1, 1.0).unwrap()
                };
                m.params_mut().zero_grad();
                graph.backward(loss, m.params_mut());
                adam.step(m.params_mut()).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
