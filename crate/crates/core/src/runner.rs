//! The experiment driver: load, subsample, partition, train the federated
//! and local schedules side by side, evaluate, and emit outputs.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataPaths, ExperimentConfig, Strategy};
use crate::data::{dirichlet_partition, load_idx, subsample_indices, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    bytes_of_params, evaluate_both, evaluate_classifier, evaluate_local_baseline, RoundRecord,
    RoundTraffic, TrafficLedger,
};
use crate::nn::{init_params, ModelArch, ModelParams};
use crate::output;
use crate::protocol::{client_prototypes, run_round, train_clients, ClientState, ServerState};
use crate::prototype::{aggregate_global_prototypes, GlobalPrototypeSet};
use crate::seeds::{self, stream};

/// Training pool and test split shared by every seed of an invocation.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(paths: &DataPaths) -> Result<LoadedData> {
    let train = load_idx(&paths.train_images, &paths.train_labels)?;
    let test = load_idx(&paths.test_images, &paths.test_labels)?;
    if train.side() != test.side() {
        return Err(Error::invalid("train and test images differ in size"));
    }
    Ok(LoadedData { train, test })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bytes {
    pub up: u64,
    pub down: u64,
}

impl From<RoundTraffic> for Bytes {
    fn from(t: RoundTraffic) -> Self {
        Bytes {
            up: t.up(),
            down: t.down(),
        }
    }
}

/// Final results of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub final_acc: BTreeMap<Strategy, f64>,
    pub total_bytes: BTreeMap<Strategy, Bytes>,
    /// Classes that no client holds; they have no global prototype.
    pub classes_without_prototype: Vec<usize>,
    /// Test samples that prototype inference could not classify.
    pub unpredictable_test_samples: usize,
    /// SHA-256 of the client partition, shared by all strategies.
    pub partition_hash: String,
    /// SHA-256 of the initial weights, shared by all strategies.
    pub init_hash: String,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    /// Ledger of the federated schedule, prototype payloads included.
    pub protofed_ledger: TrafficLedger,
    pub fedavg_ledger: TrafficLedger,
    pub prototypes: Option<GlobalPrototypeSet>,
    pub final_global: Option<ModelParams>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let n = values.len() as f64;
        Spread {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Seed-level aggregate written when several seeds run in one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub seeds: Vec<u64>,
    pub final_acc: BTreeMap<Strategy, Spread>,
    pub runs: Vec<RunSummary>,
}

pub fn multi_seed_summary(runs: &[RunResult]) -> MultiSeedSummary {
    let mut per: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (s, a) in &r.summary.final_acc {
            per.entry(*s).or_default().push(*a);
        }
    }
    MultiSeedSummary {
        seeds: runs.iter().map(|r| r.summary.seed).collect(),
        final_acc: per.into_iter().map(|(s, v)| (s, Spread::of(&v))).collect(),
        runs: runs.iter().map(|r| r.summary.clone()).collect(),
    }
}

fn sha_hex(bytes: impl AsRef<[u8]>) -> String {
    Sha256::digest(bytes.as_ref())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn partition_hash(shards: &[ClientShard]) -> String {
    let mut bytes = Vec::new();
    for s in shards {
        bytes.extend_from_slice(&(s.client_id as u64).to_le_bytes());
        bytes.extend_from_slice(&(s.indices.len() as u64).to_le_bytes());
        for &i in &s.indices {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
    }
    sha_hex(bytes)
}

/// Pool, shards and initial model for one seed.
pub struct Setup {
    pub pool: Dataset,
    pub shards: Vec<ClientShard>,
    pub init: ModelParams,
}

pub fn prepare(cfg: &ExperimentConfig, data: &LoadedData, seed: u64) -> Result<Setup> {
    let idx = subsample_indices(data.train.len(), cfg.pool_size, seeds::derive(&[seed, stream::SUBSAMPLE]))?;
    let pool = data.train.select(&idx)?;
    let shards = dirichlet_partition(
        pool.labels(),
        pool.class_count(),
        &cfg.partition_spec(seeds::derive(&[seed, stream::PARTITION])),
    )?;
    let arch = ModelArch {
        input_side: pool.side(),
        classes: pool.class_count().max(data.test.class_count()),
        ..ModelArch::default()
    };
    let init = init_params(&arch, seeds::derive(&[seed, stream::INIT]))?;
    Ok(Setup { pool, shards, init })
}

fn make_clients(setup: &Setup, seed: u64) -> Result<Vec<ClientState>> {
    setup
        .shards
        .iter()
        .map(|s| ClientState::new(s.clone(), &setup.pool, setup.init.clone(), seed))
        .collect()
}

/// Runs every configured strategy for one seed on a shared partition and
/// initialisation.
pub fn run_seed(cfg: &ExperimentConfig, data: &LoadedData, seed: u64) -> Result<RunResult> {
    let started = Instant::now();
    let setup = prepare(cfg, data, seed)?;
    let round_cfg = cfg.round_config();
    let total = cfg.rounds;
    let with_proto = cfg.has(Strategy::ProtoFed);
    let federated = with_proto || cfg.has(Strategy::FedAvg);

    let missing: Vec<usize> = (0..data.test.class_count())
        .filter(|&c| setup.shards.iter().all(|s| s.class_counts.get(c).copied().unwrap_or(0) == 0))
        .collect();
    if with_proto && !missing.is_empty() {
        warn!("seed {seed}: classes {missing:?} are held by no client and cannot be predicted by prototypes");
    }

    let mut server = ServerState::new(setup.init.clone(), total);
    let mut fed_clients = if federated { make_clients(&setup, seed)? } else { Vec::new() };
    let mut local_clients = if cfg.has(Strategy::Local) {
        make_clients(&setup, seed)?
    } else {
        Vec::new()
    };

    let mut ledger = TrafficLedger::new();
    let mut records = Vec::with_capacity(total);
    let mut unpredictable = 0;
    let mut final_acc = BTreeMap::new();

    for t in 1..=total {
        let is_last = t == total;
        if federated {
            let (next, traffic) = run_round(&server, &mut fed_clients, &round_cfg, with_proto && is_last)
                .map_err(|e| Error::Round { round: t, source: Box::new(e) })?;
            server = next;
            ledger.push(traffic);
            if is_last {
                // Final model (and prototypes) go back to every client for inference.
                let n = fed_clients.len() as u64;
                let protos = server
                    .prototypes
                    .as_ref()
                    .map_or(0, |g| g.set.serialized_len() as u64);
                ledger.add_to_last(&RoundTraffic {
                    down_params: n * bytes_of_params(&server.global),
                    down_protos: n * protos,
                    ..RoundTraffic::default()
                })?;
            }
        }
        if !local_clients.is_empty() {
            let starts: Vec<ModelParams> = local_clients.iter().map(|c| c.params.clone()).collect();
            let refs: Vec<&ModelParams> = starts.iter().collect();
            train_clients(&mut local_clients, &refs, &round_cfg, t)
                .map_err(|e| Error::Round { round: t, source: Box::new(e) })?;
        }

        let mut rec = RoundRecord {
            round: t,
            acc_local: None,
            acc_fedavg: None,
            acc_proto: None,
            bytes_up: 0,
            bytes_down: 0,
            wall_s: None,
        };
        if federated {
            let cum = ledger.cumulative(t - 1);
            let cum = if with_proto {
                cum
            } else {
                let fed: TrafficLedger = params_only(&ledger);
                fed.cumulative(t - 1)
            };
            rec.bytes_up = cum.0;
            rec.bytes_down = cum.1;
        }

        if t % cfg.eval_every == 0 || is_last {
            let eval = |e: Error| Error::Round { round: t, source: Box::new(e) };
            if with_proto {
                // Before round T the prototypes are evaluation-only and never
                // charged to the ledger.
                let globals = match (&server.prototypes, is_last) {
                    (Some(g), true) => g.clone(),
                    _ => aggregate_global_prototypes(&client_prototypes(&fed_clients).map_err(eval)?)
                        .map_err(eval)?,
                };
                let (acc_cls, proto) = evaluate_both(&server.global, &globals, &data.test).map_err(eval)?;
                rec.acc_proto = Some(proto.accuracy);
                if cfg.has(Strategy::FedAvg) {
                    rec.acc_fedavg = Some(acc_cls);
                }
                if is_last {
                    unpredictable = proto.unpredictable;
                }
            } else if federated {
                rec.acc_fedavg = Some(evaluate_classifier(&server.global, &data.test).map_err(eval)?);
            }
            if !local_clients.is_empty() {
                rec.acc_local = Some(evaluate_local_baseline(&local_clients, &data.test).map_err(eval)?);
            }
            info!(
                "seed {seed} round {t}/{total}: local {:?} fedavg {:?} proto {:?}",
                rec.acc_local, rec.acc_fedavg, rec.acc_proto
            );
        }
        if cfg.wall_time {
            rec.wall_s = Some(started.elapsed().as_secs_f64());
        }
        if is_last {
            for (s, acc) in [
                (Strategy::Local, rec.acc_local),
                (Strategy::FedAvg, rec.acc_fedavg),
                (Strategy::ProtoFed, rec.acc_proto),
            ] {
                if let Some(a) = acc {
                    final_acc.insert(s, a);
                }
            }
        }
        records.push(rec);
    }

    let fedavg_ledger = params_only(&ledger);
    let mut total_bytes = BTreeMap::new();
    if cfg.has(Strategy::Local) {
        total_bytes.insert(Strategy::Local, Bytes::default());
    }
    if cfg.has(Strategy::FedAvg) {
        total_bytes.insert(Strategy::FedAvg, fedavg_ledger.total().into());
    }
    if with_proto {
        total_bytes.insert(Strategy::ProtoFed, ledger.total().into());
    }

    let summary = RunSummary {
        seed,
        final_acc,
        total_bytes,
        classes_without_prototype: if with_proto { missing } else { Vec::new() },
        unpredictable_test_samples: unpredictable,
        partition_hash: partition_hash(&setup.shards),
        init_hash: sha_hex(setup.init.to_le_bytes()),
        config: cfg.clone(),
        elapsed_s: cfg.wall_time.then(|| started.elapsed().as_secs_f64()),
    };
    Ok(RunResult {
        records,
        summary,
        protofed_ledger: if with_proto { ledger } else { TrafficLedger::new() },
        fedavg_ledger: if cfg.has(Strategy::FedAvg) { fedavg_ledger } else { TrafficLedger::new() },
        prototypes: server.prototypes,
        final_global: federated.then_some(server.global),
    })
}

fn params_only(ledger: &TrafficLedger) -> TrafficLedger {
    let mut out = TrafficLedger::new();
    for r in ledger.rounds() {
        out.push(r.params_only());
    }
    out
}

/// Full invocation: validates, checks the output directory is writable,
/// runs every seed and writes outputs. Single-seed runs write directly
/// into `out_dir`; multi-seed runs write `seed-<n>/` subdirectories plus
/// an aggregate `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    output::preflight(&cfg.out_dir)?;
    let data = load_data(&cfg.data_paths()?)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, &data, seed)?;
        let dir = if cfg.seeds.len() == 1 {
            cfg.out_dir.clone()
        } else {
            cfg.out_dir.join(format!("seed-{seed}"))
        };
        output::emit_outputs(&run, &dir)?;
        runs.push(run);
    }
    if cfg.seeds.len() > 1 {
        output::write_json(&cfg.out_dir.join("summary.json"), &multi_seed_summary(&runs))?;
    }
    Ok(runs)
}

/// Per-client class histograms for `partition-stats`.
pub fn partition_report(cfg: &ExperimentConfig, data: &LoadedData, seed: u64) -> Result<String> {
    let setup = prepare(cfg, data, seed)?;
    let classes = setup.pool.class_count();
    let mut out = format!("seed {seed}, alpha {}, {} clients\nclient  size ", cfg.alpha, cfg.n_clients);
    for c in 0..classes {
        out.push_str(&format!("{c:>6}"));
    }
    out.push_str("  entropy\n");
    for s in &setup.shards {
        out.push_str(&format!("{:>6} {:>5} ", s.client_id, s.len()));
        for n in &s.class_counts {
            out.push_str(&format!("{n:>6}"));
        }
        out.push_str(&format!("  {:.4}\n", crate::data::label_entropy(s)));
    }
    Ok(out)
}
