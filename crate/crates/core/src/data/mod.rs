//! Datasets, IDX loading, pool subsampling and Dirichlet client partitioning.

mod idx;
mod partition;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_idx, read_idx_images, read_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use partition::{dirichlet_partition, label_entropy, ClientShard, PartitionSpec};

/// Images in `[0, 1]` shaped `N x 1 x side x side` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] {
            return Err(Error::invalid(format!(
                "images must be shaped [N, 1, S, S], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copies the given samples, in order, into a new dataset.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            images,
            labels,
            class_count: self.class_count,
        })
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Indices of a uniform draw of `n` samples without replacement, ascending.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::invalid(format!("cannot draw {n} samples from {len}")));
    }
    if n == 0 {
        return Err(Error::invalid("subsample size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform draw of `n` samples without replacement; deterministic per seed.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ds.select(&subsample_indices(ds.len(), n, seed)?)
}
