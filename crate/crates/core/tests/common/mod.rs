#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use tablediff::autoencoder::{VaeConfig, VaeParams};
use tablediff::dit::{DiTConfig, DiTParams};
use tablediff::numerics::{Rng, Tensor};

/// Desk preset shrunk to one narrow block.
pub fn tiny_dit_config(conditional: bool, latent: usize) -> DiTConfig {
    DiTConfig {
        depth: 1,
        dim: 32,
        heads: 2,
        latent_size: [latent, latent],
        freq_dim: 64,
        ..DiTConfig::preset("desk-64", conditional).unwrap()
    }
}

pub fn tiny_dit(conditional: bool, seed: u64) -> DiTParams {
    DiTParams::init(tiny_dit_config(conditional, 8), seed).unwrap()
}

pub fn tiny_vae() -> VaeParams {
    VaeParams::init(VaeConfig { widths: [4, 4, 8] }, 3)
}

/// `n` pairs of random `[4, 8, 8]` image and mask latents.
pub fn random_latents(n: usize, seed: u64) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| (rng.normal_tensor([4, 8, 8]), rng.normal_tensor([4, 8, 8])))
        .collect()
}
