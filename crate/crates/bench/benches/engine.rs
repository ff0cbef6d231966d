use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use psdn_bench::random_matrix;
use psdn_core::nn::Graph;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(&b)));
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let x = random_matrix(96, 64, 3);
    c.bench_function("attention_fwd_bwd_t96_d64_h4", |bench| {
        bench.iter(|| {
            let mut g = Graph::training();
            let q = g.variable(x.clone());
            let y = g.attention(q, q, q, 4);
            let s = g.sum_all(y);
            g.backward(s)
        })
    });
}

fn conv1d(c: &mut Criterion) {
    let x = random_matrix(96, 64, 4);
    let w = random_matrix(3 * 64, 64, 5);
    let b = random_matrix(1, 64, 6);
    c.bench_function("conv1d_fwd_bwd_t96_c64_k3", |bench| {
        bench.iter(|| {
            let mut g = Graph::training();
            let (xv, wv, bv) = (g.variable(x.clone()), g.variable(w.clone()), g.variable(b.clone()));
            let y = g.conv1d(xv, wv, bv, 3, 1, 1);
            let s = g.sum_all(y);
            g.backward(s)
        })
    });
}

fn lstm(c: &mut Criterion) {
    let x = random_matrix(96, 64, 7);
    let w_ih = random_matrix(64, 256, 8);
    let w_hh = random_matrix(64, 256, 9);
    let b = random_matrix(1, 256, 10);
    c.bench_function("lstm_fwd_bwd_t96_h64", |bench| {
        bench.iter(|| {
            let mut g = Graph::training();
            let vars = [x.clone(), w_ih.clone(), w_hh.clone(), b.clone()].map(|m| g.variable(m));
            let y = g.lstm(vars[0], vars[1], vars[2], vars[3], false);
            let s = g.sum_all(y);
            g.backward(s)
        })
    });
}

criterion_group!(benches, matmul, attention, conv1d, lstm);
criterion_main!(benches);
