//! Client/server state for synchronous federated rounds: local SGD,
//! size-weighted parameter averaging, and the final round that also
//! uplinks class prototypes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{bytes_of_params, RoundTraffic};
use crate::nn::{loss_and_grads, sgd_step, ModelParams};
use crate::prototype::{
    aggregate_global_prototypes, compute_local_prototypes, GlobalPrototypeSet, LocalPrototypeSet,
};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f32,
    pub rounds: usize,
    pub n_clients: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            batch_size: 8,
            local_epochs: 1,
            lr: 0.01,
            rounds: 100,
            n_clients: 20,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config("lr", format!("must be finite and > 0, got {}", self.lr)));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        Ok(())
    }
}

/// A simulated client: its private samples, its current model and the
/// seed its batch order derives from.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    /// The client's samples, in shard order.
    pub data: Dataset,
    pub params: ModelParams,
    pub seed: u64,
}

impl ClientState {
    pub fn new(shard: ClientShard, pool: &Dataset, params: ModelParams, run_seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Protocol(format!("client {} has an empty shard", shard.client_id)));
        }
        let data = pool.select(&shard.indices)?;
        Ok(ClientState {
            client_id: shard.client_id,
            shard,
            data,
            params,
            seed: run_seed,
        })
    }

    fn batch_rng(&self, round: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seeds::derive(&[
            self.seed,
            seeds::stream::SHUFFLE,
            self.client_id as u64,
            round as u64,
        ]))
    }

    pub fn local_prototypes(&self) -> Result<LocalPrototypeSet> {
        compute_local_prototypes(&self.params, &self.shard, &self.data)
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    /// Completed rounds.
    pub round: usize,
    pub total_rounds: usize,
    /// Populated only after the final round.
    pub prototypes: Option<GlobalPrototypeSet>,
}

impl ServerState {
    pub fn new(global: ModelParams, total_rounds: usize) -> Self {
        ServerState {
            global,
            round: 0,
            total_rounds,
            prototypes: None,
        }
    }
}

/// Runs `local_epochs` epochs of mini-batch SGD starting from `start`.
/// Each epoch reshuffles the client's samples; the last partial batch is kept.
/// `round` is 1-based and only feeds the shuffle seed.
pub fn local_update(
    state: &ClientState,
    start: &ModelParams,
    cfg: &RoundConfig,
    round: usize,
) -> Result<ModelParams> {
    if state.data.is_empty() {
        return Err(Error::Protocol(format!("client {} has no samples", state.client_id)));
    }
    start.congruent(state.params.arch())?;
    let mut rng = state.batch_rng(round);
    let mut order: Vec<usize> = (0..state.data.len()).collect();
    let mut params = start.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x: Tensor = state.data.images().gather_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| state.data.labels()[i]).collect();
            let (_, grads) = loss_and_grads(&params, &x, &y)?;
            params = sgd_step(&params, &grads, cfg.lr)?;
        }
    }
    Ok(params)
}

/// Weighted mean of parameter sets with weights `size / sum(sizes)`,
/// accumulated in f64 in the given order.
pub fn fedavg_aggregate(updates: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::invalid("no updates to aggregate"))?;
    if let Some((_, s)) = updates.iter().find(|(_, s)| *s == 0) {
        return Err(Error::invalid(format!("update with size {s}")));
    }
    for (p, _) in updates {
        p.congruent(first.arch())?;
    }
    let total: f64 = updates.iter().map(|(_, s)| *s as f64).sum();
    let mut out = (*first).clone();
    for (ti, tensor) in out.tensors_mut().iter_mut().enumerate() {
        let mut acc = vec![0.0f64; tensor.len()];
        for (p, size) in updates {
            let w = *size as f64;
            for (a, &v) in acc.iter_mut().zip(p.tensors()[ti].data()) {
                *a += w * v as f64;
            }
        }
        for (dst, a) in tensor.data_mut().iter_mut().zip(acc) {
            *dst = (a / total) as f32;
        }
    }
    Ok(out)
}

/// Runs `local_update` for every client in parallel and stores the results
/// in each client. Results never depend on scheduling.
pub fn train_clients(clients: &mut [ClientState], starts: &[&ModelParams], cfg: &RoundConfig, round: usize) -> Result<()> {
    let updated: Vec<Result<ModelParams>> = clients
        .par_iter()
        .zip(starts.par_iter())
        .map(|(c, start)| local_update(c, start, cfg, round))
        .collect();
    for (c, p) in clients.iter_mut().zip(updated) {
        c.params = p?;
    }
    Ok(())
}

/// Local prototypes of every client from its current model.
pub fn client_prototypes(clients: &[ClientState]) -> Result<Vec<LocalPrototypeSet>> {
    clients.par_iter().map(ClientState::local_prototypes).collect()
}

/// One synchronous round: broadcast, local training, size-weighted
/// averaging. When `is_final`, clients also uplink prototypes computed on
/// their freshly updated models and the server aggregates them.
pub fn run_round(
    server: &ServerState,
    clients: &mut [ClientState],
    cfg: &RoundConfig,
    is_final: bool,
) -> Result<(ServerState, RoundTraffic)> {
    if server.round >= server.total_rounds {
        return Err(Error::Protocol(format!(
            "all {} rounds already completed",
            server.total_rounds
        )));
    }
    if clients.is_empty() {
        return Err(Error::Protocol("no clients".into()));
    }
    let round = server.round + 1;
    if is_final && round != server.total_rounds {
        return Err(Error::Protocol(format!(
            "round {round} marked final but {} rounds are configured",
            server.total_rounds
        )));
    }
    let model_bytes = bytes_of_params(&server.global);
    let n = clients.len() as u64;
    let mut traffic = RoundTraffic {
        down_params: n * model_bytes,
        up_params: n * model_bytes,
        ..RoundTraffic::default()
    };

    let starts = vec![&server.global; clients.len()];
    train_clients(clients, &starts, cfg, round)?;

    let prototypes = if is_final {
        let locals = client_prototypes(clients)?;
        traffic.up_protos = locals.iter().map(|l| l.set.serialized_len() as u64).sum();
        Some(aggregate_global_prototypes(&locals)?)
    } else {
        None
    };

    let mut ordered: Vec<&ClientState> = clients.iter().collect();
    ordered.sort_by_key(|c| c.client_id);
    let updates: Vec<(&ModelParams, usize)> = ordered.iter().map(|c| (&c.params, c.shard.len())).collect();
    let global = fedavg_aggregate(&updates)?;

    Ok((
        ServerState {
            global,
            round,
            total_rounds: server.total_rounds,
            prototypes,
        },
        traffic,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelArch};

    fn tiny_client(n: usize, seed: u64) -> ClientState {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data: Vec<f32> = (0..n * 784).map(|i| ((i * 31) % 17) as f32 / 17.0).collect();
        let pool = Dataset::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels.clone(), 10).unwrap();
        let mut counts = vec![0; 10];
        for l in &labels {
            counts[*l] += 1;
        }
        let shard = ClientShard {
            client_id: 0,
            indices: (0..n).collect(),
            class_counts: counts,
        };
        ClientState::new(shard, &pool, init_params(&ModelArch::default(), seed).unwrap(), seed).unwrap()
    }

    #[test]
    fn round_config_validation() {
        assert!(RoundConfig::default().validate().is_ok());
        let bad = RoundConfig {
            lr: 0.0,
            ..RoundConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("lr"));
    }

    #[test]
    fn server_refuses_extra_rounds_and_misplaced_final() {
        let mut c = vec![tiny_client(4, 1)];
        let cfg = RoundConfig {
            rounds: 2,
            n_clients: 1,
            ..RoundConfig::default()
        };
        let s = ServerState::new(c[0].params.clone(), 2);
        assert!(run_round(&s, &mut c, &cfg, true).is_err());
        let (s1, t1) = run_round(&s, &mut c, &cfg, false).unwrap();
        assert_eq!(t1.up_protos, 0);
        assert!(s1.prototypes.is_none());
        let (s2, t2) = run_round(&s1, &mut c, &cfg, true).unwrap();
        assert!(t2.up_protos > 0);
        assert!(s2.prototypes.is_some());
        assert_eq!(s2.round, 2);
        assert!(run_round(&s2, &mut c, &cfg, false).is_err());
    }

    #[test]
    fn fedavg_rejects_empty_and_zero_size() {
        let p = init_params(&ModelArch::default(), 1).unwrap();
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(fedavg_aggregate(&[(&p, 0)]).is_err());
    }

    #[test]
    fn fedavg_rejects_mixed_architectures() {
        let p = init_params(&ModelArch::default(), 1).unwrap();
        let q = init_params(
            &ModelArch {
                embed_dim: 8,
                ..ModelArch::default()
            },
            1,
        )
        .unwrap();
        assert!(matches!(fedavg_aggregate(&[(&p, 1), (&q, 1)]), Err(Error::InvalidInput(_))));
    }
}
