use std::hint::black_box;

use aird::autograd::Graph;
use aird::distill::{mine_pairs, rld_loss, PairRows, Reduction, RelationHeads, RldConfig};
use aird::nn::functional::conv2d;
use aird::rng::Rng;
use aird::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng as _, SeedableRng};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let (a, b) = (random(&mut rng, &[n, n]), random(&mut rng, &[n, n]));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(a, b).unwrap());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(1);
    let x = random(&mut rng, &[32, 8, 16, 16]);
    let w = random(&mut rng, &[16, 8, 3, 3]);
    c.bench_function("conv2d forward+backward 32x8x16x16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let y = conv2d(&mut g, xv, wv, 1, 1).unwrap();
            let loss = g.sum_all(y);
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn mining(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(2);
    let n = 256;
    let embeds = random(&mut rng, &[n, 64]);
    let labels: Vec<usize> = (0..n).map(|i| i % 16).collect();
    let mut group = c.benchmark_group("mine_pairs 256x64");
    for n_neg in [4, 16, 64] {
        group.bench_with_input(BenchmarkId::from_parameter(n_neg), &n_neg, |bench, &k| {
            bench.iter(|| black_box(mine_pairs(&embeds, &labels, k).unwrap()))
        });
    }
    group.finish();
}

fn rld(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(3);
    let (batch, d) = (32, 64);
    let heads = RelationHeads::init(d, 32, &mut rng).unwrap();
    let teacher = random(&mut rng, &[batch, d]);
    let student = random(&mut rng, &[batch, d]);
    let cfg = RldConfig {
        tau: 0.1,
        neg_weight: 16.0,
        reduction: Reduction::Mean,
        offset: 0.5,
    };
    let mut group = c.benchmark_group("rld forward+backward");
    for n_neg in [4, 16, 64] {
        let (mut pos, mut neg) = (PairRows::default(), PairRows::default());
        for j in 0..batch {
            pos.push(rng.random_range(0..batch), j, j);
            for _ in 0..n_neg {
                neg.push(rng.random_range(0..batch), rng.random_range(0..batch), j);
            }
        }
        group.bench_with_input(BenchmarkId::from_parameter(n_neg), &n_neg, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let bound = heads.params.bind(&mut g, |_| true);
                let s = g.param(student.clone());
                let out = rld_loss(&mut g, &heads, &bound, &teacher, s, &pos, &neg, &cfg).unwrap();
                black_box(g.backward(out.loss).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, mining, rld);
criterion_main!(benches);
