use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twinformer::attention::{global_attention, local_attention, AttentionWeights, TokenMap};
use twinformer::kernels::gemm;
use twinformer::{Graph, ParamStore, Tensor};

fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect(),
    )
    .unwrap()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64usize, 128, 256] {
        let a = filled(&[n, n], 0.1);
        let b = filled(&[n, n], 0.2);
        let mut out = vec![0.0; n * n];
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, 1.0, a.data(), false, b.data(), false, 0.0, black_box(&mut out)))
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let dim = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let w = AttentionWeights::register(&mut store, &mut rng, "attn", dim, 4, Some(7)).unwrap();
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for side in [14usize, 28] {
        let x = filled(&[side * side, dim], 0.3);
        group.bench_with_input(BenchmarkId::new("local", side * side), &side, |bench, &side| {
            bench.iter(|| {
                let mut g = Graph::inference(&store);
                let t = g.input(x.clone());
                let map = TokenMap::new(&g, t, side, side).unwrap();
                black_box(local_attention(&mut g, &map, &w, 7, true).unwrap().tokens)
            })
        });
        group.bench_with_input(BenchmarkId::new("global", side * side), &side, |bench, &side| {
            bench.iter(|| {
                let mut g = Graph::inference(&store);
                let t = g.input(x.clone());
                let map = TokenMap::new(&g, t, side, side).unwrap();
                black_box(global_attention(&mut g, &map, &w).unwrap().tokens)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_attention);
criterion_main!(benches);
