use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Completed,
    /// Config hash matched a completed entry; outputs were reused.
    Reused,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub arm: String,
    pub status: EntryStatus,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    /// Command line that reproduces this entry.
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Append-only JSON-lines journal of stage runs in one output directory.
#[derive(Debug)]
pub struct RunLedger {
    path: PathBuf,
    entries: Vec<LedgerEntry>,
}

impl RunLedger {
    pub fn open(path: &Path) -> Result<Self> {
        let entries = match fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| Error::format(path, format!("ledger line {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<()> {
        let mut line = serde_json::to_string(&entry).map_err(|e| Error::Serialization(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_all().map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(entry);
        Ok(())
    }

    /// Latest completed or reused entry for `(stage, arm)` with this hash.
    pub fn find_completed(&self, stage: &str, arm: &str, config_hash: &str) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| {
            e.stage == stage
                && e.arm == arm
                && e.config_hash == config_hash
                && matches!(e.status, EntryStatus::Completed | EntryStatus::Reused)
        })
    }
}

/// SHA-256 of the canonical (key-sorted) JSON encoding.
pub fn config_hash(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json values always serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".segadapt.lock";

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Refused(format!(
                "{} is locked by another run; remove {} if no run is active",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, hash: &str, status: EntryStatus) -> LedgerEntry {
        LedgerEntry {
            stage: stage.into(),
            arm: "none".into(),
            status,
            config_hash: hash.into(),
            seed: 0,
            checkpoint: None,
            reports: vec![],
            wall_clock_secs: 0.5,
            command: "segadapt sp-train".into(),
            note: None,
        }
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut l = RunLedger::open(&path).unwrap();
        l.append(entry("sp", "aa", EntryStatus::Completed)).unwrap();
        l.append(entry("uda", "bb", EntryStatus::Skipped)).unwrap();
        let again = RunLedger::open(&path).unwrap();
        assert_eq!(again.entries(), l.entries());
        assert!(again.find_completed("sp", "none", "aa").is_some());
        assert!(again.find_completed("sp", "none", "zz").is_none());
        assert!(again.find_completed("uda", "none", "bb").is_none());
    }

    #[test]
    fn corrupt_ledger_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(RunLedger::open(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = serde_json::json!({"x": 1, "y": [1, 2]});
        let b: serde_json::Value = serde_json::from_str(r#"{"y": [1, 2], "x": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&serde_json::json!({"x": 2, "y": [1, 2]})));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Refused(_))));
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
