//! Sequential vs rayon paths for the hot kernels and one full training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mhkd::data::synth_dataset;
use mhkd::exec::set_parallel;
use mhkd::nn::{presets, GradMode, Network, Parameterized, Source, TaskSpec};
use mhkd::tensor::{BnMode, Tape, Tensor};
use mhkd::train::{OptimConfig, Sgd};
use rand::Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = mhkd::rng::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = random(&[32, 32, 32, 32], 1);
    let w = random(&[32, 32, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d_32x32x32_b32");
    for (name, par) in MODES {
        set_parallel(par);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                tape.conv2d(xv, wv, None, 1, 1).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone().with_requires_grad(true));
                let wv = tape.leaf(w.clone().with_requires_grad(true));
                let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let task = TaskSpec::new(10, (3, 32, 32));
    let (train, _) = synth_dataset(10, 4, 0, 0.5).unwrap();
    let batch = train.batch::<f32>(&(0..32).collect::<Vec<_>>());
    let optim = OptimConfig::default();
    let mut group = c.benchmark_group("student_train_step_b32");
    group.sample_size(10);
    for (name, par) in MODES {
        set_parallel(par);
        let mut net = Network::<f32>::build(&presets::tiny_student(3), &task, Source::Student, 0).unwrap();
        let mut sgd = Sgd::new();
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(batch.images.clone());
                let out = net.forward_with_taps(&mut tape, x, &[], BnMode::Train, GradMode::Track).unwrap();
                let loss = tape.cross_entropy(out.logits, &batch.labels).unwrap();
                tape.backward(loss).unwrap();
                net.pull_grads(&tape, &out.params);
                sgd.step(&mut net, &optim, 0.01).unwrap();
            })
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
