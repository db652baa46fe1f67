use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threetconv::affine::{bilinear_sample, compose, make_grid, AffineParams};
use threetconv::conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvNeeds};
use threetconv::filter::FilterBank;
use threetconv::network::{stack, train_step, ConvMode, Model, ModelSpec, Sgd, TrainConfig};
use threetconv::{par, Tensor};

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

const PATHS: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geom = ConvGeometry::new(8, 16, [3, 3, 3]).with_padding([0, 1, 1]);
    let x = uniform(&[8, 8, 5, 14, 14], &mut rng);
    let w = uniform(&geom.weight_shape(), &mut rng);
    let b = uniform(&[16], &mut rng);
    let y = conv3d_forward(&x, &w, &b, &geom).unwrap();
    let g = uniform(y.shape(), &mut rng);
    let mut group = c.benchmark_group("conv3d");
    for (name, seq) in PATHS {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("forward", name), |bench| {
            bench.iter(|| conv3d_forward(&x, &w, &b, &geom).unwrap())
        });
        group.bench_function(BenchmarkId::new("backward", name), |bench| {
            bench.iter(|| conv3d_backward(&x, &w, &geom, g.data(), ConvNeeds::ALL).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn materialize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bank = FilterBank::random(32, 8, 5, 5, 4, &mut rng).unwrap();
    for p in bank.thetas.as_mut().unwrap().data_mut().chunks_exact_mut(4) {
        p[1] = rng.gen_range(-0.3..0.3);
        p[2] = rng.gen_range(-0.2..0.2);
    }
    let source = uniform(&[64, 28, 28], &mut rng);
    let grid = make_grid(
        &compose(&AffineParams::new(1.05, 0.2, 0.03, -0.02).unwrap()).unwrap(),
        28,
        28,
    )
    .unwrap();
    let mut group = c.benchmark_group("resample");
    for (name, seq) in PATHS {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new("materialize_bank", name), |bench| {
            bench.iter(|| bank.materialize().unwrap())
        });
        group.bench_function(BenchmarkId::new("bilinear_64x28x28", name), |bench| {
            bench.iter(|| bilinear_sample(&source, &grid).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clips: Vec<Tensor> = (0..16).map(|_| uniform(&[1, 8, 28, 28], &mut rng)).collect();
    let batch = stack(&clips.iter().collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = (0..16).map(|i| i % 6).collect();
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("tinyt_step");
    group.sample_size(10);
    for mode in [ConvMode::Factorized, ConvMode::Dense] {
        for (name, seq) in PATHS {
            par::set_sequential(seq);
            let mut model = Model::new(ModelSpec::tinyt(mode, 6, 0)).unwrap();
            let mut opt = Sgd::new(&model);
            group.bench_function(BenchmarkId::new(format!("{mode:?}"), name), |bench| {
                bench.iter(|| train_step(&mut model, &mut opt, &batch, &labels, &cfg, 0).unwrap())
            });
        }
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, conv, materialize, training);
criterion_main!(benches);
