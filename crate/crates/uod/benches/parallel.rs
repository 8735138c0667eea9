//! Sequential vs. data-parallel execution of the hot tensor kernels.
//!
//! Run with `cargo bench -p uod`. Each kernel is measured twice, once per
//! execution mode, over identical inputs; outputs are bit-identical by
//! construction, so the comparison is purely about wall time.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use uod::exec::{set_mode, Exec};
use uod::tensor::Tape;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn bench_mode(c: &mut Criterion, name: &str, mode: Exec, f: impl Fn()) {
    let label = match mode {
        Exec::Seq => format!("{name}/seq"),
        Exec::Par => format!("{name}/par"),
    };
    c.bench_function(&label, |b| {
        set_mode(mode);
        b.iter(&f);
        set_mode(Exec::Par);
    });
}

fn conv1x1_forward_backward(c: &mut Criterion) {
    let x = randn(&[4, 64, 32, 32], 1);
    let w = randn(&[64, 64], 2);
    for mode in [Exec::Seq, Exec::Par] {
        bench_mode(c, "conv1x1_fwd_bwd", mode, || {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let y = xv.conv1x1(wv);
            let loss = y.mul(y).mean_all();
            tape.backward(loss);
            black_box(tape.grad(wv));
        });
    }
}

fn depthwise_forward_backward(c: &mut Criterion) {
    let x = randn(&[4, 32, 64, 64], 3);
    let k = randn(&[32, 3, 3], 4);
    for mode in [Exec::Seq, Exec::Par] {
        bench_mode(c, "depthwise3x3_fwd_bwd", mode, || {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = xv.depthwise_conv(kv);
            let loss = y.mul(y).mean_all();
            tape.backward(loss);
            black_box(tape.grad(kv));
        });
    }
}

fn batched_attention_product(c: &mut Criterion) {
    let q = randn(&[24, 64, 32], 5);
    let k = randn(&[24, 64, 32], 6);
    for mode in [Exec::Seq, Exec::Par] {
        bench_mode(c, "attention_scores", mode, || {
            let tape = Tape::new();
            let qv = tape.leaf(q.clone());
            let kv = tape.leaf(k.clone());
            let s = qv.bmm_nt(kv).softmax_lastdim();
            let loss = s.mul(s).sum_all();
            tape.backward(loss);
            black_box(tape.grad(qv));
        });
    }
}

criterion_group!(
    benches,
    conv1x1_forward_backward,
    depthwise_forward_backward,
    batched_attention_product
);
criterion_main!(benches);
