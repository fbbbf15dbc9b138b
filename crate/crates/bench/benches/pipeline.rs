//! Criterion benchmarks for the hot kernels and the end-to-end matcher.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualres_core::backbone::{patch_descriptor_dual, DualFeatures};
use dualres_core::consensus::{self, ConsensusConfig};
use dualres_core::correlation::{corr4d, CorrTensor4D};
use dualres_core::matcher::match_dense;
use dualres_core::synth::{synth, WarpKind};
use dualres_core::tensor::{ops, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(dims, data).unwrap()
}

fn scene_features(size: usize) -> (DualFeatures, DualFeatures, CorrTensor4D) {
    let scene = synth(
        3,
        (size, size),
        WarpKind::Translation { dx: 8.0, dy: 8.0 },
        4,
    )
    .unwrap();
    let da = patch_descriptor_dual(&scene.image_a, 5, 2, 4).unwrap();
    let db = patch_descriptor_dual(&scene.image_b, 5, 2, 4).unwrap();
    let c = corr4d(&da.coarse, &db.coarse).unwrap();
    let nc_cfg = ConsensusConfig::tiny();
    let params = consensus::init_nc_params(&nc_cfg, 1).unwrap();
    let cbar = consensus::refine(&c, &params, &nc_cfg).unwrap();
    (da, db, cbar)
}

fn bench_conv4d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = rand_tensor(&mut rng, &[1, 6, 6, 6, 6]);
    let kernel = rand_tensor(&mut rng, &[4, 1, 3, 3, 3, 3]);
    c.bench_function("conv4d 6^4 k3 c1->4", |b| {
        b.iter(|| ops::conv4d(&input, &kernel, 1).unwrap())
    });
}

fn bench_corr4d(c: &mut Criterion) {
    let (da, db, _) = scene_features(64);
    c.bench_function("corr4d coarse 8x8", |b| {
        b.iter(|| corr4d(&da.coarse, &db.coarse).unwrap())
    });
}

fn bench_soft_mutual_nn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = rand_tensor(&mut rng, &[8, 8, 8, 8]);
    let ct = CorrTensor4D::new(t).unwrap();
    c.bench_function("soft_mutual_nn 8^4", |b| {
        b.iter_batched(
            || ct.clone(),
            |ct| consensus::soft_mutual_nn(&ct, 1e-12).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_refine(c: &mut Criterion) {
    let (da, db, _) = scene_features(64);
    let raw = corr4d(&da.coarse, &db.coarse).unwrap();
    let nc_cfg = ConsensusConfig::tiny();
    let params = consensus::init_nc_params(&nc_cfg, 1).unwrap();
    c.bench_function("refine 8^4 tiny stack", |b| {
        b.iter(|| consensus::refine(&raw, &params, &nc_cfg).unwrap())
    });
}

fn bench_match_dense(c: &mut Criterion) {
    let (da, db, cbar) = scene_features(64);
    let mut group = c.benchmark_group("match_dense 64x64");
    group.sample_size(20);
    group.bench_function("keep 0.5", |b| {
        b.iter(|| match_dense(&da, &db, &cbar, 0.5).unwrap())
    });
    group.bench_function("keep 1.0", |b| {
        b.iter(|| match_dense(&da, &db, &cbar, 1.0).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_conv4d,
    bench_corr4d,
    bench_soft_mutual_nn,
    bench_refine,
    bench_match_dense
);
criterion_main!(benches);
