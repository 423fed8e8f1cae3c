//! Pooled versus single-threaded execution of the hot kernels.
//!
//! Each group runs the same input twice: on the default rayon pool and
//! inside `par::sequential`. Without the `parallel` feature both arms are
//! sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfc_core::encoder::DenseFeatureMap;
use sfc_core::engine::kernels::{conv2d_forward, ConvGeom};
use sfc_core::geometry::{build_positive_mask, CropBox, CropGeometry};
use sfc_core::par;
use sfc_core::propagation::{propagate_video, LabelGrid, PropagationConfig};
use std::hint::black_box;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn both<F: Fn() + Send + Sync>(c: &mut Criterion, group: &str, param: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.bench_function(BenchmarkId::new("pooled", param), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", param), |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn conv(c: &mut Criterion) {
    // second block of the default backbone on a batch of 8 views
    let geom = ConvGeom { n: 8, c: 24, h: 32, w: 32, o: 32, kh: 3, kw: 3, stride: 1, pad: 1 };
    let x = random(geom.n * geom.c * geom.h * geom.w, 1);
    let w = random(geom.o * geom.c * 9, 2);
    both(c, "conv2d_forward", "8x24x32x32->32", || {
        black_box(conv2d_forward(&geom, &x, &w, None));
    });
}

fn mask(c: &mut Criterion) {
    let a = CropGeometry::new((256, 256), CropBox { x0: 10, y0: 20, w: 180, h: 160 }, false, 64, (16, 16)).unwrap();
    let b = CropGeometry::new((256, 256), CropBox { x0: 60, y0: 40, w: 150, h: 190 }, true, 64, (16, 16)).unwrap();
    both(c, "positive_mask", "16x16", || {
        black_box(build_positive_mask(&a, &b, 0.7).unwrap());
    });
}

fn propagation(c: &mut Criterion) {
    let (rows, cols, dim, frames, classes) = (16, 16, 48, 12, 4);
    let features: Vec<DenseFeatureMap> = (0..frames)
        .map(|t| DenseFeatureMap::new(rows, cols, dim, random(rows * cols * dim, 10 + t as u64)).unwrap())
        .collect();
    let labels: Vec<f64> = (0..rows * cols).flat_map(|q| (0..classes).map(move |k| f64::from(q % classes == k))).collect();
    let first = LabelGrid::new(rows, cols, classes, labels).unwrap();
    let cfg = PropagationConfig::single().rescaled(rows);
    both(c, "propagate_video", "12x16x16", || {
        black_box(propagate_video(&features, &first, &cfg).unwrap());
    });
}

criterion_group!(benches, conv, mask, propagation);
criterion_main!(benches);
