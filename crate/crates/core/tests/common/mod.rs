#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tribyol_core::augment::Image;
use tribyol_core::config::RunConfig;
use tribyol_core::data::ImageSource;

/// Random images held in memory; enough for short training runs.
pub struct NoisePool(pub Vec<Image>);

impl NoisePool {
    pub fn new(n: usize, side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self((0..n).map(|_| Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.random()).collect()).unwrap()).collect())
    }
}

impl ImageSource for NoisePool {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn image(&self, index: usize) -> Image {
        self.0[index].clone()
    }
}

pub const TINY: &str = r#"
format_version = 1

[dataset]
id = "toy-shapes"

[model]
encoder = "toy"
input_resolution = 16
toy_widths = [4, 8, 8, 8]
hidden_dim = 16
embedding_dim = 8

[train]
batch_size = 4
epochs = 1
checkpoint_every = 0
"#;

pub fn tiny_run() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}
