//! The thread pool and the sequential fallback give bitwise equal results.
#![cfg(feature = "parallel")]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threetconv::data::{make_dataset, ClassSet, DatasetConfig};
use threetconv::network::{stack, train_step, ConvMode, Model, ModelSpec, Sgd, TrainConfig};
use threetconv::{par, Tensor};

fn run() -> (Vec<Tensor>, Vec<u64>, Vec<Tensor>) {
    let mut cfg = DatasetConfig::new(ClassSet::Motion6, 12, 5);
    cfg.shape.width = 16;
    cfg.shape.height = 16;
    cfg.magnitudes.translate_px = 1.0;
    let data = make_dataset(&cfg).unwrap();
    let clips: Vec<Tensor> = data.clips.iter().map(|c| c.frames.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::new(ModelSpec::tinyt_for([1, 8, 16, 16], ConvMode::Factorized, 6, 5)).unwrap();
    for layer in &mut model.layers {
        for p in &mut layer.params {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.01..0.01);
            }
        }
    }
    let mut opt = Sgd::new(&model);
    let batch = stack(&clips.iter().collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig::default();
    let losses = (0..3)
        .map(|step| train_step(&mut model, &mut opt, &batch, &data.labels(), &cfg, step).unwrap().to_bits())
        .collect();
    let weights = model.layers.iter().flat_map(|l| l.params.iter().map(|p| p.value.clone())).collect();
    (clips, losses, weights)
}

#[test]
fn pool_and_sequential_paths_agree_bitwise() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    par::set_sequential(false);
    let (clips, losses, weights) = run();
    par::set_sequential(true);
    let (clips_seq, losses_seq, weights_seq) = run();
    par::set_sequential(false);

    assert!(clips.iter().zip(&clips_seq).all(|(a, b)| a.bitwise_eq(b)));
    assert_eq!(losses, losses_seq);
    assert!(weights.iter().zip(&weights_seq).all(|(a, b)| a.bitwise_eq(b)));
}
