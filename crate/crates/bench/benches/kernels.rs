use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use linattn::attention::{gated_linear_backward, gated_linear_forward, GateParams};
use linattn::rnn::Encoder;
use linattn::{
    build_sketch_batch, linear_attention, linear_attention_backward, softmax_attention, HiddenStates, Matrix,
    Vector,
};

const K: usize = 100;

fn states(n: usize, k: usize, rng: &mut ChaCha8Rng) -> HiddenStates {
    HiddenStates::new(Matrix::random_uniform(n, k, 1.0, rng)).unwrap()
}

fn lookups(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Vector::random_uniform(K, 1.0, &mut rng);
    let mut group = c.benchmark_group("lookup");
    for n in [250, 700, 1000, 4000] {
        let h = states(n, K, &mut rng);
        let sketch = build_sketch_batch(&h);
        group.bench_with_input(BenchmarkId::new("softmax", n), &n, |b, _| {
            b.iter(|| softmax_attention(black_box(&h), black_box(&q)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("linear", n), &n, |b, _| {
            b.iter(|| linear_attention(black_box(&sketch), black_box(&q)).unwrap())
        });
    }
    group.finish();
}

fn sketch_building(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("build_sketch");
    for n in [250, 1000] {
        let h = states(n, K, &mut rng);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| build_sketch_batch(black_box(&h))));
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 32;
    let h = states(60, k, &mut rng);
    let q = Vector::random_uniform(k, 1.0, &mut rng);
    let g = Vector::random_uniform(k, 1.0, &mut rng);
    let gp = GateParams::random(k, &mut rng);
    let (_, tape) = gated_linear_forward(&h, &gp, &q).unwrap();
    c.bench_function("linear_attention_backward n=60 k=32", |b| {
        b.iter(|| linear_attention_backward(black_box(&h), &q, &g).unwrap())
    });
    c.bench_function("gated_linear_backward n=60 k=32", |b| {
        b.iter(|| gated_linear_backward(black_box(&tape), &q, &g, &gp).unwrap())
    });
}

fn encoding(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = Encoder::random(1000, K, K, &mut rng);
    let tokens: Vec<usize> = (0..250).map(|i| (i * 37) % 1000).collect();
    c.bench_function("gru encode n=250 k=100", |b| {
        b.iter(|| enc.for_each_state(black_box(&tokens), |h| {
            black_box(h);
            Ok(())
        }))
    });
}

criterion_group!(benches, lookups, sketch_building, backward, encoding);
criterion_main!(benches);
