use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgfs::geom::{Camera, Quaternion};
use qgfs::raster::{render, render_backward, Gaussian, GaussianCloud, RasterConfig, FEATURE_DIM};

fn cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0);
            Gaussian {
                mean: Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(0.8..1.6)),
                rotation: Quaternion::from_axis_angle(axis.normalize(), rng.gen_range(0.0..3.0)),
                scale: std::array::from_fn(|_| rng.gen_range(0.005..0.03)),
                opacity: rng.gen_range(0.3..0.95),
                color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
                feature: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            }
        })
        .collect();
    GaussianCloud::new(gaussians)
}

fn bench(c: &mut Criterion) {
    let size = 128;
    let cam = Camera::identity_pose(110.0, 110.0, size as f64 / 2.0, size as f64 / 2.0, size, size);
    let cl = cloud(4096, 1);
    let d_color = vec![1e-3; size * size * 3];
    let d_feat = vec![1e-3; size * size * FEATURE_DIM];
    let mut group = c.benchmark_group("raster");
    for parallel in [false, true] {
        let cfg = RasterConfig { parallel, ..RasterConfig::default() };
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::new("forward", label), &cfg, |b, cfg| b.iter(|| render(&cl, &cam, cfg)));
        let (_, state) = render(&cl, &cam, &cfg);
        group.bench_with_input(BenchmarkId::new("backward", label), &cfg, |b, _| {
            b.iter(|| render_backward(&cl, &state, &d_color, &d_feat).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
