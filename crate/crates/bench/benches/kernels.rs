use criterion::{criterion_group, criterion_main, Criterion};
use laneseg_bench::{random_tensor, random_unit};
use laneseg_core::autodiff::{conv2d, deform_sample};
use laneseg_core::evaluation::chamfer_distance;
use laneseg_core::heads_loss::hungarian_match;
use laneseg_core::Tape;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let a = random_tensor(&[325, 32], 1);
    let b = random_tensor(&[32, 64], 2);
    c.bench_function("matmul 325x32x64 forward+backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = tape.param(a.clone()).matmul(tape.param(b.clone())).unwrap();
            black_box(tape.backward(y.sum().unwrap()).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[7, 8, 32, 48], 3);
    let w = random_tensor(&[16, 8, 3, 3], 4);
    c.bench_function("conv2d 7x8x32x48 k3 forward+backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = conv2d(tape.param(x.clone()), tape.param(w.clone()), 1, 1).unwrap();
            black_box(tape.backward(y.sum().unwrap()).unwrap());
        })
    });
}

fn deform(c: &mut Criterion) {
    let levels = [(4usize, 6usize); 7];
    let value = random_tensor(&[7 * 24, 32], 5);
    let points = random_unit(&[325, 4, 7, 4, 2], 6);
    let weights = random_unit(&[325, 4, 7, 4], 7);
    c.bench_function("deform_sample 325 queries x 7 levels forward+backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = deform_sample(
                tape.param(value.clone()),
                &levels,
                tape.param(points.clone()),
                tape.param(weights.clone()),
            )
            .unwrap();
            black_box(tape.backward(y.sum().unwrap()).unwrap());
        })
    });
}

fn matching(c: &mut Criterion) {
    let cost = random_unit(&[12, 16], 8);
    c.bench_function("hungarian 12 gt x 16 queries", |bench| bench.iter(|| black_box(hungarian_match(&cost).unwrap())));
    let a: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 0.5 * i as f64]).collect();
    let b: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 + 0.3, 0.5 * i as f64 - 0.2]).collect();
    c.bench_function("chamfer 10x10", |bench| bench.iter(|| black_box(chamfer_distance(&a, &b).unwrap())));
}

criterion_group!(benches, matmul, conv, deform, matching);
criterion_main!(benches);
