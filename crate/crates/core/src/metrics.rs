//! Top-1 evaluation and byte-level communication accounting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{embed, head, ModelParams};
use crate::protocol::ClientState;
use crate::prototype::{nearest_prototype, GlobalPrototypeSet};
use crate::tensor::Tensor;

/// Framing overhead charged per transmitted parameter tensor.
pub const TENSOR_HEADER_BYTES: u64 = 16;

const EVAL_CHUNK: usize = 250;

/// 4 bytes per scalar plus a fixed header per tensor.
pub fn bytes_of_tensors(tensors: &[Tensor]) -> u64 {
    tensors
        .iter()
        .map(|t| 4 * t.len() as u64 + TENSOR_HEADER_BYTES)
        .sum()
}

pub fn bytes_of_params(params: &ModelParams) -> u64 {
    bytes_of_tensors(params.tensors())
}

/// Bytes moved during one round, split by payload kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub up_params: u64,
    pub up_protos: u64,
    pub down_params: u64,
    pub down_protos: u64,
}

impl RoundTraffic {
    pub fn up(&self) -> u64 {
        self.up_params + self.up_protos
    }

    pub fn down(&self) -> u64 {
        self.down_params + self.down_protos
    }

    pub fn total(&self) -> u64 {
        self.up() + self.down()
    }

    /// The same round with prototype payloads removed.
    pub fn params_only(&self) -> RoundTraffic {
        RoundTraffic {
            up_params: self.up_params,
            down_params: self.down_params,
            ..RoundTraffic::default()
        }
    }

    pub fn add(&mut self, other: &RoundTraffic) {
        self.up_params += other.up_params;
        self.up_protos += other.up_protos;
        self.down_params += other.down_params;
        self.down_protos += other.down_protos;
    }
}

/// Per-round traffic of one strategy.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLedger {
    rounds: Vec<RoundTraffic>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, round: RoundTraffic) {
        self.rounds.push(round);
    }

    /// Adds to the most recent round (e.g. a post-training broadcast).
    pub fn add_to_last(&mut self, extra: &RoundTraffic) -> Result<()> {
        self.rounds
            .last_mut()
            .ok_or_else(|| Error::Protocol("no round recorded yet".into()))?
            .add(extra);
        Ok(())
    }

    pub fn rounds(&self) -> &[RoundTraffic] {
        &self.rounds
    }

    pub fn total(&self) -> RoundTraffic {
        let mut t = RoundTraffic::default();
        for r in &self.rounds {
            t.add(r);
        }
        t
    }

    /// Cumulative (up, down) bytes through round index `i` inclusive.
    pub fn cumulative(&self, i: usize) -> (u64, u64) {
        self.rounds[..=i]
            .iter()
            .fold((0, 0), |(u, d), r| (u + r.up(), d + r.down()))
    }
}

/// One row of the per-round curve. Accuracies are `None` for strategies
/// that were not run or rounds that were not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub acc_local: Option<f64>,
    pub acc_fedavg: Option<f64>,
    pub acc_proto: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrototypeEval {
    pub accuracy: f64,
    /// Test samples whose class has no global prototype (always wrong).
    pub unpredictable: usize,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

struct ChunkTally {
    classifier: usize,
    proto: usize,
    unpredictable: usize,
}

fn tally(params: &ModelParams, globals: Option<&GlobalPrototypeSet>, test: &Dataset) -> Result<ChunkTally> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let order: Vec<usize> = (0..test.len()).collect();
    let parts: Vec<Result<ChunkTally>> = order
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let emb = embed(params, &test.images().gather_rows(chunk)?)?;
            let logits = head(params, &emb)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| test.labels()[i]).collect();
            let classifier = labels
                .iter()
                .enumerate()
                .filter(|(r, &y)| argmax(logits.row(*r)) == y)
                .count();
            let (proto, unpredictable) = match globals {
                Some(g) => {
                    let pred = nearest_prototype(g, &emb)?;
                    let hits = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
                    let missing = labels.iter().filter(|&&y| g.set.get(y).is_none()).count();
                    (hits, missing)
                }
                None => (0, 0),
            };
            Ok(ChunkTally {
                classifier,
                proto,
                unpredictable,
            })
        })
        .collect();
    let mut total = ChunkTally {
        classifier: 0,
        proto: 0,
        unpredictable: 0,
    };
    for p in parts {
        let p = p?;
        total.classifier += p.classifier;
        total.proto += p.proto;
        total.unpredictable += p.unpredictable;
    }
    Ok(total)
}

/// Fraction of test samples whose highest logit (lowest id on ties) is the label.
pub fn evaluate_classifier(params: &ModelParams, test: &Dataset) -> Result<f64> {
    let t = tally(params, None, test)?;
    Ok(t.classifier as f64 / test.len() as f64)
}

/// Top-1 accuracy of nearest-prototype prediction.
pub fn evaluate_prototype(params: &ModelParams, globals: &GlobalPrototypeSet, test: &Dataset) -> Result<PrototypeEval> {
    if globals.set.is_empty() {
        return Err(Error::invalid("global prototype set is empty"));
    }
    let t = tally(params, Some(globals), test)?;
    Ok(PrototypeEval {
        accuracy: t.proto as f64 / test.len() as f64,
        unpredictable: t.unpredictable,
    })
}

/// Classifier and prototype accuracy from a single embedding pass.
pub fn evaluate_both(
    params: &ModelParams,
    globals: &GlobalPrototypeSet,
    test: &Dataset,
) -> Result<(f64, PrototypeEval)> {
    if globals.set.is_empty() {
        return Err(Error::invalid("global prototype set is empty"));
    }
    let t = tally(params, Some(globals), test)?;
    let n = test.len() as f64;
    Ok((
        t.classifier as f64 / n,
        PrototypeEval {
            accuracy: t.proto as f64 / n,
            unpredictable: t.unpredictable,
        },
    ))
}

/// Unweighted mean over clients of their own models' test accuracy.
pub fn evaluate_local_baseline(clients: &[ClientState], test: &Dataset) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::invalid("no clients to evaluate"));
    }
    let mut sum = 0.0;
    for c in clients {
        sum += evaluate_classifier(&c.params, test)?;
    }
    Ok(sum / clients.len() as f64)
}
