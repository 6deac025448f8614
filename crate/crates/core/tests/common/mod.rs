#![allow(dead_code)]

use dualteacher::phantom::{generate_dataset, make_folds, DatasetBundle, PhantomSpec};
use dualteacher::tensor::{LabelMap, ProbMap};
use dualteacher::trainer::{Method, TrainConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 16x16, 3 classes: 8 source, 16 target -> per fold 4 val, 4 d_t, 8 d_u.
pub fn tiny_bundle(seed: u64) -> DatasetBundle {
    let spec = PhantomSpec::new(16, 3, seed);
    let samples = generate_dataset(&spec, 8, 16).unwrap();
    let mut folds = make_folds(&samples, 4, 1.0 / 3.0, seed).unwrap();
    let mut b = folds.swap_remove(0);
    b.spec = Some(spec);
    b
}

pub fn tiny_config(method: Method, seed: u64, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(method, seed).with_epochs(epochs);
    c.network.num_classes = 3;
    c.network.base_channels = 4;
    c.learning_rate = 1e-3;
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random strictly positive simplex map.
pub fn random_probs(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> ProbMap<f64> {
    let n = h * w;
    let mut data = vec![0.0; classes * n];
    for px in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (c, v) in raw.into_iter().enumerate() {
            data[c * n + px] = v / s;
        }
    }
    ProbMap::new(classes, h, w, data).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes as u8)).collect()).unwrap()
}
