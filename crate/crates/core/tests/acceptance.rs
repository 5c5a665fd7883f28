//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Needs MNIST (see `common::mnist_dir`).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::oracles;
use common::reference::check_gradients;
use common::synth::{random_batch, random_labels, random_params, rng};
use protofed::config::{ExperimentConfig, Strategy};
use protofed::data::{dirichlet_partition, label_entropy, ClientShard, Dataset, PartitionSpec};
use protofed::metrics::{bytes_of_params, evaluate_classifier, evaluate_prototype};
use protofed::nn::{embed, loss_and_grads, ModelArch, ModelParams};
use protofed::prototype::{
    self, aggregate_global_prototypes, compute_local_prototypes, nearest_prototype_predict, LocalPrototypeSet,
};
use protofed::protocol::fedavg_aggregate;
use protofed::runner::{prepare, run_seed, LoadedData};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_arch() -> ModelArch {
    ModelArch {
        input_side: 16,
        conv1_channels: 4,
        conv2_channels: 8,
        embed_dim: 8,
        ..ModelArch::default()
    }
}

fn c1_gradients() -> Outcome {
    let arch = gradient_arch();
    let started = Instant::now();
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let p = random_params(&arch, &mut r);
        let x = random_batch(&arch, 2, &mut r);
        let y = random_labels(arch.classes, 2, &mut r);
        let (_, g) = loss_and_grads(&p, &x, &y).unwrap();
        let res = check_gradients(&p, g.tensors(), &x, &y, 1e-3);
        worst = worst.max(res.max_rel_err);
        checked += res.checked;
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!("max rel err {worst:.2e} over {checked} entries, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn small_dataset(arch: &ModelArch, n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Dataset {
    let x = random_batch(arch, n, r);
    let y = random_labels(arch.classes, n, r);
    Dataset::new(x, y, arch.classes).unwrap()
}

fn whole(ds: &Dataset, id: usize) -> ClientShard {
    ClientShard {
        client_id: id,
        indices: (0..ds.len()).collect(),
        class_counts: ds.class_histogram(),
    }
}

fn c2_oracles() -> Outcome {
    let arch = common::synth::small_arch();
    let mut r = rng(1002);
    let mut mismatches = [0usize; 4];
    for _ in 0..50 {
        let k = r.random_range(1..6);
        let ps: Vec<ModelParams> = (0..k).map(|_| random_params(&arch, &mut r)).collect();
        let updates: Vec<(&ModelParams, usize)> = ps.iter().map(|p| (p, r.random_range(1..1000))).collect();
        let got = fedavg_aggregate(&updates).unwrap();
        if got.tensors().iter().zip(oracles::fedavg(&updates)).any(|(t, w)| t.data() != &w[..]) {
            mismatches[0] += 1;
        }

        let p = random_params(&arch, &mut r);
        let ds = small_dataset(&arch, r.random_range(1..40), &mut r);
        let local = compute_local_prototypes(&p, &whole(&ds, 0), &ds).unwrap();
        let want = oracles::local_prototypes(&p, &ds);
        if local.set.len() != want.len()
            || local.set.iter().any(|(c, e)| (&e.vector, e.count) != (&want[&c].0, want[&c].1))
        {
            mismatches[1] += 1;
        }

        let locals: Vec<LocalPrototypeSet> = (0..r.random_range(1..6))
            .map(|id| {
                let ds = small_dataset(&arch, r.random_range(1..15), &mut r);
                compute_local_prototypes(&p, &whole(&ds, id), &ds).unwrap()
            })
            .collect();
        let globals = aggregate_global_prototypes(&locals).unwrap();
        let want = oracles::global_prototypes(&locals);
        if globals.set.len() != want.len()
            || globals.set.iter().any(|(c, e)| (&e.vector, e.count) != (&want[&c].0, want[&c].1))
        {
            mismatches[2] += 1;
        }

        let q = random_batch(&arch, 20, &mut r);
        let pred = nearest_prototype_predict(&p, &globals, &q).unwrap();
        if pred != oracles::nearest(&globals, &embed(&p, &q).unwrap()) {
            mismatches[3] += 1;
        }
    }
    outcome(
        mismatches.iter().all(|&m| m == 0),
        format!("mismatches fedavg/local/global/nearest = {mismatches:?} of 50 each"),
    )
}

fn c3_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let conf = tmp.path().join("det.conf");
    std::fs::write(
        &conf,
        format!(
            "data_dir = {}\npool_size = 1000\nn_clients = 5\nrounds = 3\nseed = 5\n",
            common::mnist_dir().display()
        ),
    )
    .unwrap();
    let mut csvs = Vec::new();
    let mut times = Vec::new();
    for (i, threads) in ["1", "4"].iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let started = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_protofed"))
            .args(["run", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("PROTOFED_THREADS", threads)
            .output()
            .unwrap();
        times.push(started.elapsed().as_secs_f64());
        if !o.status.success() {
            return outcome(false, format!("run failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        csvs.push(std::fs::read(out.join("rounds.csv")).unwrap());
    }
    outcome(
        csvs[0] == csvs[1],
        format!("rounds.csv identical for 1 and 4 threads; runs took {:.1}s and {:.1}s", times[0], times[1]),
    )
}

fn desk_config(alpha: f64, strategies: &[Strategy]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data_dir = Some(common::mnist_dir());
    cfg.alpha = alpha;
    cfg.pool_size = 5000;
    cfg.n_clients = 20;
    cfg.batch_size = 8;
    cfg.local_epochs = 1;
    cfg.lr = 0.01;
    cfg.rounds = 100;
    cfg.eval_every = 100;
    cfg.strategies = strategies.iter().copied().collect();
    cfg
}

fn mean_final(cfg: &ExperimentConfig, data: &LoadedData) -> std::collections::BTreeMap<Strategy, f64> {
    let mut sums = std::collections::BTreeMap::new();
    for seed in [1, 2, 3] {
        let run = run_seed(cfg, data, seed).unwrap();
        for (s, a) in run.summary.final_acc {
            *sums.entry(s).or_insert(0.0) += a / 3.0;
        }
    }
    sums
}

fn c4_margin(data: &LoadedData) -> Outcome {
    let started = Instant::now();
    let cfg = desk_config(0.1, &[Strategy::FedAvg, Strategy::ProtoFed]);
    let m = mean_final(&cfg, data);
    let (fed, proto) = (m[&Strategy::FedAvg], m[&Strategy::ProtoFed]);
    outcome(
        proto >= fed + 0.005,
        format!(
            "alpha=0.1 mean proto {proto:.4} vs fedavg {fed:.4} (margin {:+.2}pp, need >= +0.50pp), {:.0}s",
            100.0 * (proto - fed),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn c5_local_gap(data: &LoadedData) -> Outcome {
    let started = Instant::now();
    let cfg = desk_config(0.05, &[Strategy::Local, Strategy::FedAvg, Strategy::ProtoFed]);
    let m = mean_final(&cfg, data);
    let (local, fed, proto) = (m[&Strategy::Local], m[&Strategy::FedAvg], m[&Strategy::ProtoFed]);
    outcome(
        fed >= local + 0.10 && proto >= local + 0.10,
        format!(
            "alpha=0.05 mean local {local:.4}, fedavg {fed:.4}, proto {proto:.4}, {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn c6_ledger(data: &LoadedData) -> Outcome {
    let mut cfg = desk_config(0.1, &[Strategy::FedAvg]);
    cfg.rounds = 3;
    cfg.eval_every = 3;
    let fed = run_seed(&cfg, data, 1).unwrap();
    cfg.strategies = [Strategy::ProtoFed].into();
    let pro = run_seed(&cfg, data, 1).unwrap();
    let (fr, pr) = (fed.fedavg_ledger.rounds(), pro.protofed_ledger.rounds());
    let early_equal = fr[..2] == pr[..2];
    let overhead = pro.protofed_ledger.total().total() - fed.fedavg_ledger.total().total();
    let (n, c, d) = (20u64, 10u64, 64u64);
    let per_client = 8 + c * (8 + 4 * d);
    assert_eq!(per_client, prototype::serialized_len(10, 64) as u64);
    let broadcast = n * per_client;
    let bound = n * per_client + broadcast;
    let model = bytes_of_params(pro.final_global.as_ref().unwrap());
    outcome(
        early_equal && overhead <= bound && model == 187_048,
        format!("rounds 1..T-1 equal: {early_equal}; overhead {overhead} B <= bound {bound} B; model {model} B"),
    )
}

fn c7_skew() -> Outcome {
    let started = Instant::now();
    let labels: Vec<usize> = (0..5000).map(|i| i % 10).collect();
    let entropy = |alpha: f64| {
        (1..=10u64)
            .map(|seed| {
                let spec = PartitionSpec {
                    n_clients: 20,
                    alpha,
                    pool_size: 5000,
                    seed,
                };
                let shards = dirichlet_partition(&labels, 10, &spec).unwrap();
                shards.iter().map(label_entropy).sum::<f64>() / shards.len() as f64
            })
            .sum::<f64>()
            / 10.0
    };
    let (lo, mid, hi) = (entropy(0.05), entropy(1.0), entropy(1000.0));

    let mut r = rng(1007);
    let mut bad = 0;
    for _ in 0..200 {
        let classes = r.random_range(2..12);
        let n_clients = r.random_range(1..25);
        let n = r.random_range(n_clients..800);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let spec = PartitionSpec {
            n_clients,
            alpha: 10f64.powf(r.random_range(-2.0..3.0)),
            pool_size: n,
            seed: r.random(),
        };
        let shards = dirichlet_partition(&labels, classes, &spec).unwrap();
        let mut seen = vec![0u32; n];
        for s in &shards {
            for &i in &s.indices {
                seen[i] += 1;
            }
        }
        if shards.len() != n_clients || seen.iter().any(|&c| c != 1) || shards.iter().any(|s| s.is_empty()) {
            bad += 1;
        }
    }
    let elapsed = started.elapsed();
    outcome(
        lo < mid && mid < hi && bad == 0 && elapsed < Duration::from_secs(60),
        format!(
            "entropy {lo:.3} < {mid:.3} < {hi:.3}; {bad}/200 bad trials; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c8_chance(data: &LoadedData) -> Outcome {
    let cfg = desk_config(0.1, &[Strategy::FedAvg, Strategy::ProtoFed]);
    let mut cls = Vec::new();
    let mut proto = Vec::new();
    for seed in 1..=5 {
        let setup = prepare(&cfg, data, seed).unwrap();
        let locals: Vec<LocalPrototypeSet> = setup
            .shards
            .iter()
            .map(|s| compute_local_prototypes(&setup.init, s, &setup.pool.select(&s.indices).unwrap()).unwrap())
            .collect();
        let globals = aggregate_global_prototypes(&locals).unwrap();
        cls.push(evaluate_classifier(&setup.init, &data.test).unwrap());
        proto.push(evaluate_prototype(&setup.init, &globals, &data.test).unwrap().accuracy);
    }
    let ok = |v: &[f64]| v.iter().all(|a| (a - 0.10).abs() <= 0.05);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        ok(&cls) && ok(&proto),
        format!("classifier [{}], prototype [{}], need 0.10 +/- 0.05", fmt(&cls), fmt(&proto)),
    )
}

fn main() -> ExitCode {
    let data = common::load_mnist();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 gradient oracle", Box::new(c1_gradients)),
        ("2 aggregation oracles", Box::new(c2_oracles)),
        ("3 determinism", Box::new(c3_determinism)),
        ("4 desk-scale margin", Box::new(|| c4_margin(&data))),
        ("5 local gap", Box::new(|| c5_local_gap(&data))),
        ("6 communication accounting", Box::new(|| c6_ledger(&data))),
        ("7 dirichlet skew", Box::new(c7_skew)),
        ("8 chance level", Box::new(|| c8_chance(&data))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!("{} criterion {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
