//! Random instances and synthetic IDX datasets for integration tests.

use std::path::{Path, PathBuf};

use protofed::data::{IMAGE_MAGIC, LABEL_MAGIC};
use protofed::nn::{init_params, ModelArch, ModelParams};
use protofed::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The downsized architecture used for finite-difference checks.
pub fn small_arch() -> ModelArch {
    ModelArch {
        conv1_channels: 4,
        conv2_channels: 8,
        embed_dim: 8,
        ..ModelArch::default()
    }
}

/// Seeded params with biases jittered away from zero.
pub fn random_params(arch: &ModelArch, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = init_params(arch, rng.random()).unwrap();
    for (i, t) in p.tensors_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    p
}

pub fn random_batch(arch: &ModelArch, b: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = b * arch.input_len();
    Tensor::new(
        vec![b, 1, arch.input_side, arch.input_side],
        (0..n).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

pub fn random_labels(classes: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..classes)).collect()
}

/// Class-dependent synthetic 28x28 digits: a bright bar whose position
/// depends on the label, plus noise.
pub fn synthetic_images(labels: &[usize], seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut px = Vec::with_capacity(labels.len() * 784);
    for &l in labels {
        for y in 0..28 {
            for x in 0..28 {
                let on = (y / 3 == l % 10 && x > 3 && x < 24) || (x / 3 == (l * 3) % 10 && y > 6);
                let base: u8 = if on { 200 } else { 10 };
                px.push(base.saturating_add(r.random_range(0..40)));
            }
        }
    }
    px
}

pub fn write_idx_pair(dir: &Path, stem: &str, labels: &[usize], seed: u64) -> (PathBuf, PathBuf) {
    let mut img = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [labels.len() as u32, 28, 28] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend_from_slice(&synthetic_images(labels, seed));
    let mut lab = LABEL_MAGIC.to_be_bytes().to_vec();
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    let ip = dir.join(format!("{stem}-images-idx3-ubyte"));
    let lp = dir.join(format!("{stem}-labels-idx1-ubyte"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

/// Writes a small synthetic train/test pair with the standard MNIST file names.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    let tl: Vec<usize> = (0..train).map(|i| (i * 7 + i / 11) % 10).collect();
    let el: Vec<usize> = (0..test).map(|i| (i * 3 + i / 7) % 10).collect();
    write_idx_pair(dir, "train", &tl, 1);
    write_idx_pair(dir, "t10k", &el, 2);
}
