use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use motionprior::autograd::{ConvSpec, Graph};
use motionprior::models::{build_model, Arch, Injection, ModelConfig};
use motionprior::motion::{corrupt_slice, draw_motion_params, MotionConfig};
use motionprior::ssim::{ssim, ssim_grad, SsimParams};
use motionprior::tensor::Tensor;
use motionprior_bench::{phantom_slice, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SAME: ConvSpec = ConvSpec { stride: 1, pad: 1 };

fn conv(c: &mut Criterion) {
    let x = random_tensor([4, 16, 64, 64], 1);
    let w = random_tensor([16, 16, 3, 3], 2);
    let b = random_tensor([1, 16, 1, 1], 3);
    let target = random_tensor([4, 16, 64, 64], 4);
    let mut group = c.benchmark_group("conv3x3_16ch_64px_b4");
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            black_box(g.conv2d(x, w, Some(b), SAME).unwrap());
        })
    });
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), SAME).unwrap();
            let t = g.input(target.clone());
            let loss = g.l1_loss(y, t).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_64px_b4");
    group.sample_size(10);
    for (name, injection, n_prior) in [
        ("unet_baseline", Injection::Baseline, 0),
        ("unet_multichannel", Injection::Multichannel, 2),
        ("unet_dualbranch", Injection::Dualbranch, 2),
    ] {
        let model = build_model::<f32>(&ModelConfig::desk(Arch::Unet, injection, n_prior), 0).unwrap();
        let x = random_tensor([4, 1, 64, 64], 5);
        let priors = (n_prior > 0).then(|| random_tensor([4, n_prior, 64, 64], 6));
        let target = random_tensor([4, 1, 64, 64], 7);
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let p = model.bind_trainable(&mut g);
                let xv = g.input(x.clone());
                let pv = priors.as_ref().map(|t| g.input(t.clone()));
                let y = model.forward_graph(&mut g, &p, xv, pv).unwrap();
                let t = g.input(target.clone());
                let loss = g.l1_loss(y, t).unwrap();
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn motion(c: &mut Criterion) {
    let mut group = c.benchmark_group("corrupt_slice");
    for n in [64, 256] {
        let img = phantom_slice(n);
        let trace = draw_motion_params(&MotionConfig::default(), img.dim(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &img, |bench, img| {
            bench.iter(|| black_box(corrupt_slice(img, &trace).unwrap()))
        });
    }
    group.finish();
}

fn ssim_bench(c: &mut Criterion) {
    let p = SsimParams::default();
    let mut group = c.benchmark_group("ssim");
    for n in [64, 256] {
        let x = phantom_slice(n);
        let trace = draw_motion_params(&MotionConfig::default(), x.dim(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = corrupt_slice(&x, &trace).unwrap();
        group.bench_with_input(BenchmarkId::new("value", n), &(&x, &y), |bench, (x, y)| {
            bench.iter(|| black_box(ssim(x, y, &p).unwrap()))
        });
        let (x64, y64) = (x.mapv(f64::from), y.mapv(f64::from));
        group.bench_with_input(BenchmarkId::new("gradient", n), &(&x64, &y64), |bench, (x, y)| {
            bench.iter(|| black_box(ssim_grad(x, y, &p).unwrap()))
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let model = build_model::<f32>(&ModelConfig::desk(Arch::Resnet, Injection::Baseline, 0), 0).unwrap();
    let x: Tensor<f32> = random_tensor([4, 1, 64, 64], 8);
    c.bench_function("resnet_forward_64px_b4", |bench| {
        bench.iter(|| black_box(model.forward(&x, None).unwrap()))
    });
}

criterion_group!(benches, conv, train_step, motion, ssim_bench, model_forward);
criterion_main!(benches);
