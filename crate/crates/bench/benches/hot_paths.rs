use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use roger_bench::desk;
use roger_core::degradation::{add_lowlight_noise, judge, NoiseParams};
use roger_core::mapping::{map_step, MapperConfig};
use roger_core::rasterizer::{render, render_backward};
use roger_core::tracking::{track_from, TrackerConfig};
use roger_core::{RgbImage, ScalarMap};

fn rasterizer(c: &mut Criterion) {
    let mut g = c.benchmark_group("render");
    for (w, h) in [(64, 48), (160, 120)] {
        let f = desk(w, h, 2);
        g.bench_with_input(BenchmarkId::new("forward", format!("{w}x{h}")), &f, |b, f| {
            b.iter(|| render(&f.map, &f.pose, &f.k))
        });
        let out = render(&f.map, &f.pose, &f.k);
        let gc = RgbImage::filled(w, h, [1.0, 0.5, 0.25]);
        let (gd, go) = (ScalarMap::filled(w, h, 1.0), ScalarMap::filled(w, h, 0.1));
        g.bench_with_input(BenchmarkId::new("backward", format!("{w}x{h}")), &out, |b, out| {
            b.iter(|| render_backward(out, &gc, &gd, &go))
        });
    }
    g.finish();
}

fn optimization(c: &mut Criterion) {
    let f = desk(64, 48, 1);
    let mut g = c.benchmark_group("optimize");
    g.sample_size(10);
    let cfg = TrackerConfig::default();
    g.bench_function("track_64x48", |b| b.iter(|| track_from(&f.map, &f.frame, &f.k, &f.pose, &cfg).unwrap()));
    let mcfg = MapperConfig { iters: 10, ..MapperConfig::default() };
    g.bench_function("map_step_10_iters_64x48", |b| {
        b.iter(|| {
            let mut m = f.map.clone();
            map_step(&mut m, &f.frame, &f.pose, &f.k, &mcfg).unwrap()
        })
    });
    g.finish();
}

fn degradation(c: &mut Criterion) {
    let f = desk(160, 120, 4);
    let p = NoiseParams::default();
    c.bench_function("judge_160x120", |b| b.iter(|| judge(&f.frame.rgb)));
    c.bench_function("lowlight_160x120", |b| b.iter(|| add_lowlight_noise(&f.frame.rgb, &p)));
}

criterion_group!(benches, rasterizer, optimization, degradation);
criterion_main!(benches);
