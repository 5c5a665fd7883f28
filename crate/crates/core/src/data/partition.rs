//! Label-skewed client partitioning: every class is split across clients
//! with proportions drawn from a symmetric Dirichlet distribution.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Dirichlet concentration; smaller means more skewed.
    pub alpha: f64,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            n_clients: 20,
            alpha: 0.1,
            pool_size: 5000,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::config("alpha", format!("must be finite and > 0, got {}", self.alpha)));
        }
        if self.pool_size == 0 {
            return Err(Error::config("pool_size", "must be positive"));
        }
        Ok(())
    }
}

/// One client's slice of the training pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Ascending indices into the pool.
    pub indices: Vec<usize>,
    /// Samples per class; sums to `indices.len()`.
    pub class_counts: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shannon entropy (nats) of a shard's label distribution.
pub fn label_entropy(shard: &ClientShard) -> f64 {
    let total = shard.len() as f64;
    if total == 0.0 {
        return 0.0;
    }
    shard
        .class_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Largest-remainder apportionment of `total` items; ties go to the lowest index.
fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits pool indices across `spec.n_clients` clients, class by class.
///
/// Shards are disjoint, cover the pool, and every client ends up with at
/// least one sample: an empty client takes one sample from the largest
/// shard (lowest id on ties) until none is empty.
pub fn dirichlet_partition(
    labels: &[usize],
    class_count: usize,
    spec: &PartitionSpec,
) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::invalid("cannot partition an empty pool"));
    }
    if labels.len() < spec.n_clients {
        return Err(Error::invalid(format!(
            "{} samples cannot give {} clients one sample each",
            labels.len(),
            spec.n_clients
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::invalid(format!("label {bad} out of range for {class_count} classes")));
    }

    let n = spec.n_clients;
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::config("alpha", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // per client, per class: assigned pool indices
    let mut buckets: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); class_count]; n];
    for class in 0..class_count {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let quotas = apportion(&dirichlet(&gamma, n, &mut rng), members.len());
        let mut start = 0;
        for (client, q) in quotas.into_iter().enumerate() {
            buckets[client][class].extend_from_slice(&members[start..start + q]);
            start += q;
        }
    }

    let size = |b: &Vec<Vec<usize>>| b.iter().map(Vec::len).sum::<usize>();
    while let Some(empty) = buckets.iter().position(|b| size(b) == 0) {
        let donor = (0..n)
            .max_by(|&a, &b| size(&buckets[a]).cmp(&size(&buckets[b])).then(b.cmp(&a)))
            .expect("at least one client");
        let class = (0..class_count)
            .max_by(|&a, &b| {
                buckets[donor][a]
                    .len()
                    .cmp(&buckets[donor][b].len())
                    .then(b.cmp(&a))
            })
            .expect("at least one class");
        let bucket = &mut buckets[donor][class];
        let (pos, _) = bucket
            .iter()
            .enumerate()
            .max_by_key(|(_, &idx)| idx)
            .expect("donor class is nonempty");
        let moved = bucket.swap_remove(pos);
        buckets[empty][class].push(moved);
    }

    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(client_id, per_class)| {
            let class_counts = per_class.iter().map(Vec::len).collect();
            let mut indices: Vec<usize> = per_class.into_iter().flatten().collect();
            indices.sort_unstable();
            ClientShard {
                client_id,
                indices,
                class_counts,
            }
        })
        .collect())
}
