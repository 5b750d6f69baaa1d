use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use plgt_bench::{desk_model, random_tensor, sentences};
use plgt_core::decode::{beam_decode, ModelScorer, DEFAULT_ALPHA};
use plgt_core::model::ModelConfig;
use plgt_core::textpipe::START;
use plgt_core::Tape;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random_tensor(&[n, n], 1), random_tensor(&[n, n], 2));
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
                black_box(y.value());
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let (x, w) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let loss = x.matmul(w).unwrap().sum();
                tape.backward(loss).unwrap();
                black_box(tape.len());
            })
        });
    }
    g.finish();
}

fn teacher_forced(len: usize) -> Vec<Vec<u32>> {
    sentences(8, len, 32, 4)
        .into_iter()
        .map(|s| std::iter::once(START).chain(s).collect())
        .collect()
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    g.sample_size(20);
    let models = [
        ("plga", desk_model(ModelConfig::desk(32, 32))),
        ("sdpa", desk_model(ModelConfig::desk_sdpa(32, 32))),
    ];
    for len in [8, 16] {
        let src = sentences(8, len, 32, 3);
        let tgt = teacher_forced(len);
        for (name, model) in &models {
            g.bench_with_input(BenchmarkId::new(*name, len), &len, |bench, _| {
                bench.iter(|| black_box(model.logits(&src, &tgt).unwrap()))
            });
        }
    }
    g.finish();
}

fn beam(c: &mut Criterion) {
    let mut g = c.benchmark_group("beam_decode");
    g.sample_size(10);
    let model = desk_model(ModelConfig::desk(32, 32));
    let src = &sentences(1, 8, 32, 5)[0];
    for width in [1, 4] {
        g.bench_with_input(BenchmarkId::new("plga", width), &width, |bench, &w| {
            bench.iter(|| {
                let scorer = ModelScorer::new(&model, src).unwrap();
                black_box(beam_decode(&scorer, src.len(), w, DEFAULT_ALPHA, 4).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, forward, beam);
criterion_main!(benches);
