use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protofed::config::parse_config;
use protofed::runner::{load_data, partition_report, run_experiment};
use protofed::Error;

#[derive(Parser)]
#[command(name = "protofed", version, about = "Federated prototype-inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write rounds.csv, summary.json and prototypes.bin.
    Run(RunArgs),
    /// Print per-client class histograms of the configured partition.
    PartitionStats(ConfigArg),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of local,fedavg,protofed.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("rounds", self.rounds.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("strategies", self.strategies.clone());
        push("out_dir", self.out.as_ref().map(|p| p.display().to_string()));
        o
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("PROTOFED_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config {
            key: "PROTOFED_THREADS".into(),
            reason: format!("expected a positive integer, got `{raw}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Protocol(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::Run(args) => {
            let cfg = parse_config(Some(&args.config), &args.overrides())?;
            let runs = run_experiment(&cfg)?;
            for r in &runs {
                let accs: Vec<String> = r
                    .summary
                    .final_acc
                    .iter()
                    .map(|(s, a)| format!("{s}={a:.4}"))
                    .collect();
                println!("seed {}: {}", r.summary.seed, accs.join(" "));
            }
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::PartitionStats(args) => {
            let cfg = parse_config(Some(&args.config), &[])?;
            let data = load_data(&cfg.data_paths()?)?;
            for &seed in &cfg.seeds {
                print!("{}", partition_report(&cfg, &data, seed)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
