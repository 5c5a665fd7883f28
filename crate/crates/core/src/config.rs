//! Experiment configuration: flat `key = value` files with `#` comments,
//! overridden by command-line flags.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PartitionSpec;
use crate::error::{Error, Result};
use crate::protocol::RoundConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Local,
    FedAvg,
    ProtoFed,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local" => Ok(Strategy::Local),
            "fedavg" => Ok(Strategy::FedAvg),
            "protofed" => Ok(Strategy::ProtoFed),
            other => Err(Error::config("strategies", format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Local => "local",
            Strategy::FedAvg => "fedavg",
            Strategy::ProtoFed => "protofed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "fashion-mnist")]
    FashionMnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    /// Directory holding the four files under their standard names.
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub n_clients: usize,
    pub alpha: f64,
    pub pool_size: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f32,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub strategies: BTreeSet<Strategy>,
    pub out_dir: PathBuf,
    /// Accuracy is measured every `eval_every` rounds and always after the last.
    pub eval_every: usize,
    /// Write wall-clock seconds into `rounds.csv` (makes it non-reproducible).
    pub wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetName::Mnist,
            data_dir: Some(PathBuf::from("data/mnist")),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            n_clients: 20,
            alpha: 0.1,
            pool_size: 5000,
            batch_size: 8,
            local_epochs: 1,
            lr: 0.01,
            rounds: 100,
            seeds: vec![1],
            strategies: [Strategy::Local, Strategy::FedAvg, Strategy::ProtoFed].into(),
            out_dir: PathBuf::from("out"),
            eval_every: 1,
            wall_time: false,
        }
    }
}

/// Resolved locations of the four dataset files.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetName::Mnist,
                    "fashion-mnist" => DatasetName::FashionMnist,
                    other => return Err(Error::config(key, format!("unknown dataset `{other}`"))),
                }
            }
            "data_dir" => self.data_dir = opt_path(value),
            "train_images" => self.train_images = opt_path(value),
            "train_labels" => self.train_labels = opt_path(value),
            "test_images" => self.test_images = opt_path(value),
            "test_labels" => self.test_labels = opt_path(value),
            "n_clients" => self.n_clients = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "pool_size" => self.pool_size = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "local_epochs" => self.local_epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "seed" => self.seeds = vec![parse_num(key, value)?],
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "strategies" => {
                self.strategies = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Strategy::from_str)
                    .collect::<Result<_>>()?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "wall_time" => self.wall_time = parse_num(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            lr: self.lr,
            rounds: self.rounds,
            n_clients: self.n_clients,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            n_clients: self.n_clients,
            alpha: self.alpha,
            pool_size: self.pool_size,
            seed,
        }
    }

    pub fn has(&self, s: Strategy) -> bool {
        self.strategies.contains(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.round_config().validate()?;
        self.partition_spec(0).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "at least one strategy is required"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.pool_size < self.n_clients {
            return Err(Error::config(
                "pool_size",
                format!("{} samples cannot cover {} clients", self.pool_size, self.n_clients),
            ));
        }
        self.data_paths().map(|_| ())
    }

    /// Explicit file keys win; otherwise standard names under `data_dir`,
    /// preferring an uncompressed file and falling back to `.gz`.
    pub fn data_paths(&self) -> Result<DataPaths> {
        let pick = |key: &str, explicit: &Option<PathBuf>, stem: &str| -> Result<PathBuf> {
            if let Some(p) = explicit {
                return Ok(p.clone());
            }
            let dir = self
                .data_dir
                .as_ref()
                .ok_or_else(|| Error::config(key, "no path given and no data_dir set"))?;
            let plain = dir.join(stem);
            let gz = dir.join(format!("{stem}.gz"));
            Ok(if !plain.exists() && gz.exists() { gz } else { plain })
        };
        Ok(DataPaths {
            train_images: pick("train_images", &self.train_images, "train-images-idx3-ubyte")?,
            train_labels: pick("train_labels", &self.train_labels, "train-labels-idx1-ubyte")?,
            test_images: pick("test_images", &self.test_images, "t10k-images-idx3-ubyte")?,
            test_labels: pick("test_labels", &self.test_labels, "t10k-labels-idx1-ubyte")?,
        })
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config("<file>", format!("line {}: expected `key = value`", lineno + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Builds a validated config from an optional file plus overrides applied
/// in order after it.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for (k, v) in parse_config_text(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
