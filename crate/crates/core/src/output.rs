//! `rounds.csv`, `summary.json` and `prototypes.bin`, each written to a
//! temporary name and renamed into place.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::RoundRecord;
use crate::runner::RunResult;

pub const CSV_HEADER: &str = "round,acc_local,acc_fedavg,acc_proto,bytes_up,bytes_down,wall_s";

/// Creates `dir` and checks it is writable before any training starts.
pub fn preflight(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".protofed-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn cell(v: Option<f64>, precision: usize) -> String {
    v.map(|x| format!("{x:.precision$}")).unwrap_or_default()
}

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            cell(r.acc_local, 6),
            cell(r.acc_fedavg, 6),
            cell(r.acc_proto, 6),
            r.bytes_up,
            r.bytes_down,
            cell(r.wall_s, 3)
        ));
    }
    out
}

pub fn emit_outputs(run: &RunResult, dir: &Path) -> Result<()> {
    if run.records.is_empty() {
        return Err(Error::invalid("no round records to write"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("rounds.csv"), rounds_csv(&run.records).as_bytes())?;
    write_json(&dir.join("summary.json"), &run.summary)?;
    if let Some(g) = &run.prototypes {
        write_atomic(&dir.join("prototypes.bin"), &g.set.to_bytes()?)?;
    }
    Ok(())
}
