//! On-disk layout of experiment outputs. Records are content-addressed by
//! config hash and written atomically via rename.
//!
//! ```text
//! DIR/manifest.json
//! DIR/runs/<hash>/config.json
//! DIR/runs/<hash>/rows.jsonl        one checkpoint per line
//! DIR/runs/<hash>/summary.json
//! DIR/runs/<hash>/seed<S>.<mode>.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::CostLedger;
use crate::config::{ExperimentConfig, Mode};
use crate::error::{DclError, Result};
use crate::sim::{RecordRow, RunRecord, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub config_hash: String,
    pub mode: Mode,
    /// Directory relative to the output root.
    pub path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

/// A run read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRun {
    pub config: ExperimentConfig,
    pub rows: Vec<RecordRow>,
    pub summary: RunSummary,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| DclError::Io(e.error))?;
    Ok(())
}

fn run_dir(out: &Path, hash: &str) -> PathBuf {
    out.join("runs").join(hash)
}

pub fn read_manifest(out: &Path) -> Result<Manifest> {
    let path = out.join("manifest.json");
    if !path.exists() {
        return Ok(Manifest::default());
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Writes one run's files and registers it in the manifest, replacing any
/// entry with the same config hash.
pub fn save_run(out: &Path, record: &RunRecord) -> Result<ManifestEntry> {
    let hash = record.config.hash();
    let dir = run_dir(out, &hash);
    write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(&record.config)?)?;
    let mut rows = Vec::new();
    for r in record.rows() {
        serde_json::to_writer(&mut rows, r)?;
        rows.push(b'\n');
    }
    write_atomic(&dir.join("rows.jsonl"), &rows)?;
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&record.summary())?)?;
    for s in &record.seeds {
        for (kind, ledger) in &s.ledgers {
            let name = format!("seed{}.{}.csv", s.seed, kind.as_str());
            write_atomic(&dir.join(name), ledger.to_csv().as_bytes())?;
        }
    }
    let entry = ManifestEntry {
        name: record.config.name.clone(),
        config_hash: hash.clone(),
        mode: record.config.mode,
        path: format!("runs/{hash}"),
    };
    let mut manifest = read_manifest(out)?;
    manifest.runs.retain(|e| e.config_hash != hash);
    manifest.runs.push(entry.clone());
    manifest.runs.sort_by(|a, b| (&a.name, &a.config_hash).cmp(&(&b.name, &b.config_hash)));
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(entry)
}

pub fn load_run(out: &Path, entry: &ManifestEntry) -> Result<StoredRun> {
    let dir = out.join(&entry.path);
    let config: ExperimentConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
    let summary: RunSummary = serde_json::from_slice(&fs::read(dir.join("summary.json"))?)?;
    let rows = fs::read_to_string(dir.join("rows.jsonl"))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<RecordRow>, _>>()?;
    Ok(StoredRun { config, rows, summary })
}

pub fn load_ledger(path: &Path) -> Result<CostLedger> {
    CostLedger::from_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn missing_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_manifest(dir.path()).unwrap().runs.is_empty());
    }
}
