use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use facefit_bench::{checkerboard, fixture};
use facefit_core::fitting::{fit_teacher, loss_photometric_with_grad};
use facefit_core::metrics::ssim;
use facefit_core::rasterizer::{rasterize, render, render_backward};
use facefit_core::uv::unwarp;
use facefit_core::{FitConfig, MaskMode, Scene};

fn rendering(c: &mut Criterion) {
    let mut group = c.benchmark_group("render");
    for size in [64, 128, 256] {
        let fx = fixture(size);
        let world = fx.model.evaluate_shape(&fx.coeffs).unwrap();
        group.bench_with_input(BenchmarkId::new("rasterize", size), &size, |b, _| {
            b.iter(|| rasterize(&fx.camera, black_box(&world), &fx.model.topology))
        });
        let scene = Scene::new(&fx.model, fx.coeffs.clone(), Some(fx.lighting), fx.camera);
        group.bench_with_input(BenchmarkId::new("forward", size), &size, |b, _| {
            b.iter(|| render(black_box(&scene)).unwrap())
        });
        let out = render(&scene).unwrap();
        let (_, up) = loss_photometric_with_grad(&out, &checkerboard(size, size), MaskMode::Foreground).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", size), &size, |b, _| {
            b.iter(|| render_backward(&out, black_box(&up), &scene).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let fx = fixture(128);
    let a = render(&Scene::new(&fx.model, fx.coeffs.clone(), Some(fx.lighting), fx.camera)).unwrap();
    let b = render(&Scene::new(&fx.model, fx.coeffs.clone(), None, fx.camera)).unwrap();
    c.bench_function("ssim/128", |bench| {
        bench.iter(|| ssim(black_box(&a.color), &b.color, None).unwrap())
    });
    c.bench_function("unwarp/128->256", |bench| {
        bench.iter(|| unwarp(black_box(&a.color), &fx.coeffs, &fx.model, &fx.camera, 256).unwrap())
    });
}

fn fitting(c: &mut Criterion) {
    let fx = fixture(64);
    let img = render(&Scene::new(&fx.model, fx.coeffs.clone(), Some(fx.lighting), fx.camera)).unwrap();
    let cfg = FitConfig {
        iterations: 50,
        warmup_iterations: 10,
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("teacher/50-iterations", |b| {
        b.iter(|| fit_teacher(black_box(&img.color), &fx.landmarks, &fx.model, &fx.camera, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, rendering, metrics, fitting);
criterion_main!(benches);
