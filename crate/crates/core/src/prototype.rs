//! Class prototypes: per-client class-mean embeddings, their server-side
//! average and nearest-prototype (L2) prediction.
//!
//! Serialized form (little-endian): magic `PRO1`, `u16` entry count,
//! `u16` embedding width, then per entry `i32` class id, `i32` count and
//! `d` `f32` values.

use std::collections::BTreeMap;

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::{embed, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PRO1";
pub const HEADER_BYTES: usize = 8;

/// Bytes taken by one serialized entry of width `dim`.
pub fn entry_bytes(dim: usize) -> usize {
    8 + 4 * dim
}

/// Serialized size of a set with `entries` classes of width `dim`.
pub fn serialized_len(entries: usize, dim: usize) -> usize {
    HEADER_BYTES + entries * entry_bytes(dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEntry {
    pub vector: Vec<f32>,
    /// Local sets: supporting samples. Global sets: contributing clients.
    pub count: usize,
}

/// Mapping class id -> prototype; backs both local and global sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    entries: BTreeMap<usize, PrototypeEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPrototypeSet {
    pub client_id: usize,
    pub set: PrototypeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrototypeSet {
    pub set: PrototypeSet,
}

impl PrototypeSet {
    pub fn new(dim: usize) -> Self {
        PrototypeSet {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f32>, count: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "prototype width {} does not match {}",
                vector.len(),
                self.dim
            )));
        }
        if count == 0 {
            return Err(Error::invalid("prototype count must be positive"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite prototype"));
        }
        self.entries.insert(class, PrototypeEntry { vector, count });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    /// Entries in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &PrototypeEntry)> {
        self.entries.iter().map(|(&c, e)| (c, e))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn serialized_len(&self) -> usize {
        serialized_len(self.len(), self.dim)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = u16::try_from(self.len())
            .map_err(|_| Error::invalid("too many prototype entries to serialize"))?;
        let dim = u16::try_from(self.dim).map_err(|_| Error::invalid("prototype width exceeds u16"))?;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&entries.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for (class, e) in self.iter() {
            let class = i32::try_from(class).map_err(|_| Error::invalid("class id exceeds i32"))?;
            let count = i32::try_from(e.count).map_err(|_| Error::invalid("count exceeds i32"))?;
            out.extend_from_slice(&class.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::PrototypeFormat(m.to_string());
        if bytes.len() < HEADER_BYTES || bytes[..4] != MAGIC {
            return Err(bad("missing PRO1 header"));
        }
        let entries = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if bytes.len() != serialized_len(entries, dim) {
            return Err(bad(&format!(
                "expected {} bytes for {entries} entries of width {dim}, got {}",
                serialized_len(entries, dim),
                bytes.len()
            )));
        }
        let word = |at: usize| [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
        let mut set = PrototypeSet::new(dim);
        for e in 0..entries {
            let at = HEADER_BYTES + e * entry_bytes(dim);
            let class = i32::from_le_bytes(word(at));
            let count = i32::from_le_bytes(word(at + 4));
            if class < 0 || count <= 0 {
                return Err(bad("negative class id or non-positive count"));
            }
            let vector = (0..dim).map(|k| f32::from_le_bytes(word(at + 8 + 4 * k))).collect();
            if set.get(class as usize).is_some() {
                return Err(bad("duplicate class id"));
            }
            set.insert(class as usize, vector, count as usize)
                .map_err(|e| Error::PrototypeFormat(e.to_string()))?;
        }
        Ok(set)
    }
}

const EMBED_CHUNK: usize = 64;

/// Class-mean embeddings of one client's samples. `local` holds the
/// client's samples in shard order; classes without samples are absent.
pub fn compute_local_prototypes(
    params: &ModelParams,
    shard: &ClientShard,
    local: &Dataset,
) -> Result<LocalPrototypeSet> {
    if local.is_empty() {
        return Err(Error::invalid(format!("client {} has no samples", shard.client_id)));
    }
    let dim = params.arch().embed_dim;
    let mut sums = vec![vec![0.0f64; dim]; local.class_count()];
    let mut counts = vec![0usize; local.class_count()];
    let order: Vec<usize> = (0..local.len()).collect();
    for chunk in order.chunks(EMBED_CHUNK) {
        let emb = embed(params, &local.images().gather_rows(chunk)?)?;
        for (row, &i) in chunk.iter().enumerate() {
            let class = local.labels()[i];
            counts[class] += 1;
            for (acc, &v) in sums[class].iter_mut().zip(emb.row(row)) {
                *acc += v as f64;
            }
        }
    }
    let mut set = PrototypeSet::new(dim);
    for (class, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
        if n > 0 {
            set.insert(class, sum.iter().map(|s| (s / n as f64) as f32).collect(), n)?;
        }
    }
    Ok(LocalPrototypeSet {
        client_id: shard.client_id,
        set,
    })
}

/// Unweighted mean of each class prototype over the clients that hold
/// that class; the stored count is the number of such clients.
pub fn aggregate_global_prototypes(locals: &[LocalPrototypeSet]) -> Result<GlobalPrototypeSet> {
    let first = locals
        .first()
        .ok_or_else(|| Error::invalid("no local prototype sets to aggregate"))?;
    let dim = first.set.dim();
    if let Some(bad) = locals.iter().find(|l| l.set.dim() != dim) {
        return Err(Error::invalid(format!(
            "client {} prototypes have width {}, expected {dim}",
            bad.client_id,
            bad.set.dim()
        )));
    }
    // Canonical client order keeps the f64 sums order-independent.
    let mut ordered: Vec<&LocalPrototypeSet> = locals.iter().collect();
    ordered.sort_by_key(|l| l.client_id);

    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for local in ordered {
        for (class, e) in local.set.iter() {
            let slot = acc.entry(class).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, &v) in slot.0.iter_mut().zip(&e.vector) {
                *s += v as f64;
            }
            slot.1 += 1;
        }
    }
    let mut set = PrototypeSet::new(dim);
    for (class, (sum, m)) in acc {
        set.insert(class, sum.iter().map(|s| (s / m as f64) as f32).collect(), m)?;
    }
    Ok(GlobalPrototypeSet { set })
}

/// Index of the nearest prototype for every row of `embeddings` (`B x d`).
/// Ties go to the lowest class id.
pub fn nearest_prototype(globals: &GlobalPrototypeSet, embeddings: &Tensor) -> Result<Vec<usize>> {
    let set = &globals.set;
    if set.is_empty() {
        return Err(Error::invalid("global prototype set is empty"));
    }
    if embeddings.shape().len() != 2 || embeddings.shape()[1] != set.dim() {
        return Err(Error::invalid(format!(
            "embedding shape {:?} does not match prototype width {}",
            embeddings.shape(),
            set.dim()
        )));
    }
    Ok((0..embeddings.rows())
        .map(|r| {
            let q = embeddings.row(r);
            let mut best = (f64::INFINITY, usize::MAX);
            for (class, e) in set.iter() {
                let d: f64 = q
                    .iter()
                    .zip(&e.vector)
                    .map(|(&a, &b)| {
                        let diff = a as f64 - b as f64;
                        diff * diff
                    })
                    .sum();
                if d < best.0 {
                    best = (d, class);
                }
            }
            best.1
        })
        .collect())
}

/// Embeds the batch with the feature extractor and predicts the class of
/// the nearest global prototype.
pub fn nearest_prototype_predict(
    params: &ModelParams,
    globals: &GlobalPrototypeSet,
    batch: &Tensor,
) -> Result<Vec<usize>> {
    if globals.set.is_empty() {
        return Err(Error::invalid("global prototype set is empty"));
    }
    nearest_prototype(globals, &embed(params, batch)?)
}
