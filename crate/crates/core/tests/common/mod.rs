#![allow(dead_code)]

pub mod oracles;
pub mod reference;
pub mod synth;

use std::path::PathBuf;

/// Directory holding the four MNIST IDX files. Set `PROTOFED_MNIST_DIR` to
/// override `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    let dir = std::env::var_os("PROTOFED_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let probe = dir.join("train-images-idx3-ubyte");
    let probe_gz = dir.join("train-images-idx3-ubyte.gz");
    assert!(
        probe.exists() || probe_gz.exists(),
        "MNIST not found in {}; download the four IDX files there or set PROTOFED_MNIST_DIR",
        dir.display()
    );
    dir
}

pub fn load_mnist() -> protofed::runner::LoadedData {
    let mut cfg = protofed::config::ExperimentConfig::default();
    cfg.data_dir = Some(mnist_dir());
    protofed::runner::load_data(&cfg.data_paths().unwrap()).unwrap()
}
