use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tan2d_bench::{filled, model, reduced_config, sample};
use tan2d_core::eval::score_map;
use tan2d_core::model::Runtime;
use tan2d_core::numeric::{Linear, Tape};
use tan2d_core::tan::{masked_conv_forward, ConvPlan};
use tan2d_core::temporal_map::CandidateMask;
use tan2d_core::train::sample_gradients;

fn candidate_mask(c: &mut Criterion) {
    let mut g = c.benchmark_group("candidate_mask");
    for n in [16, 64, 128] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| CandidateMask::new(black_box(n)).unwrap().count())
        });
    }
    g.finish();
}

fn masked_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("masked_conv");
    for (n, k) in [(16, 5), (64, 9)] {
        let d = 64;
        let mask = CandidateMask::new(n).unwrap();
        let plan = Arc::new(ConvPlan::new(&mask, k).unwrap());
        let x = filled(vec![n * n, d], 1.0);
        let layer = Linear {
            weight: filled(vec![k * k * d, d], 2.0),
            bias: filled(vec![d], 3.0),
        };
        g.bench_function(BenchmarkId::new("forward_backward", format!("n{n}_k{k}")), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(&x);
                let lv = layer.bind(&mut tape);
                let y = masked_conv_forward(&mut tape, xv, &lv, &plan).unwrap();
                let s = tape.sum(y);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    g.finish();
}

fn full_model(c: &mut Criterion) {
    let params = model(reduced_config(16, 32));
    let rt = Runtime::new(&params.config).unwrap();
    let s = sample(&params);
    let mut g = c.benchmark_group("model");
    g.bench_function("inference_n16", |b| {
        b.iter(|| black_box(score_map(&params, &rt, &s.tokens, &s.clips.features).unwrap()))
    });
    g.bench_function("train_step_n16", |b| {
        b.iter(|| black_box(sample_gradients(&params, &rt, &s, 0.5, 1.0).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, candidate_mask, masked_conv, full_model);
criterion_main!(benches);
