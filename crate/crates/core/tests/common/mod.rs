#![allow(dead_code)]

use gist_core::tensor::Scalar;
use gist_core::vit::{BackboneConfig, Images, Vit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config() -> BackboneConfig {
    BackboneConfig {
        image_side: 8,
        patch_side: 4,
        channels: 1,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_hidden: 32,
        num_classes: 3,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pixels(rng: &mut ChaCha8Rng, cfg: &BackboneConfig, batch: usize) -> Vec<f32> {
    (0..batch * cfg.channels * cfg.image_side * cfg.image_side)
        .map(|_| rng.random::<f32>())
        .collect()
}

pub fn images<'a>(data: &'a [f32], cfg: &BackboneConfig, batch: usize) -> Images<'a> {
    Images {
        data,
        batch,
        channels: cfg.channels,
        height: cfg.image_side,
        width: cfg.image_side,
    }
}

pub fn model<F: Scalar>(seed: u64) -> Vit<F> {
    Vit::new(micro_config(), seed).unwrap()
}

pub fn bits<F: Scalar>(xs: &[F]) -> Vec<u64> {
    xs.iter().map(|x| x.to_f64().to_bits()).collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}
