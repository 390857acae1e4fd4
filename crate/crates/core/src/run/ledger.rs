//! Append-only experiment ledger: one JSONL row per completed stage,
//! carrying enough hashes to reconstruct where any number came from. A
//! lock file serializes appends across processes sharing a run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::RunError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub config_hash: String,
    pub code_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_hash: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub struct ExperimentLedger {
    path: PathBuf,
    lock_path: PathBuf,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_millis()
}

impl ExperimentLedger {
    pub fn open(run_dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(run_dir)?;
        Ok(Self {
            path: run_dir.join("ledger.jsonl"),
            lock_path: run_dir.join("ledger.lock"),
        })
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, RunError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&self.path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(RunError::from))
            .collect()
    }

    /// Completed stage with matching identity hashes, for idempotence.
    pub fn find(
        &self,
        stage: &str,
        config_hash: &str,
        input_checkpoint: Option<&str>,
        data_hash: Option<&str>,
    ) -> Result<Option<LedgerEntry>, RunError> {
        Ok(self.entries()?.into_iter().rev().find(|e| {
            e.stage == stage
                && e.config_hash == config_hash
                && e.input_checkpoint.as_deref() == input_checkpoint
                && e.data_hash.as_deref() == data_hash
        }))
    }

    pub fn append(&self, mut entry: LedgerEntry, started_ms: u128) -> Result<(), RunError> {
        entry.started_unix_ms = started_ms;
        entry.finished_unix_ms = now_ms();
        let _guard = LockGuard::acquire(&self.lock_path)?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        Ok(())
    }
}

pub fn stage_clock() -> u128 {
    now_ms()
}

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(path: &Path) -> Result<Self, RunError> {
        // create_new is atomic on every platform we care about; stale
        // locks older than 60s are reclaimed.
        for _ in 0..600 {
            match fs::OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(_) => {
                    return Ok(Self {
                        path: path.to_path_buf(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if let Ok(meta) = fs::metadata(path) {
                        if let Ok(modified) = meta.modified() {
                            if modified.elapsed().map(|d| d.as_secs() > 60).unwrap_or(false) {
                                let _ = fs::remove_file(path);
                                continue;
                            }
                        }
                    }
                    std::thread::sleep(std::time::Duration::from_millis(100));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(RunError::Io(std::io::Error::new(
            std::io::ErrorKind::TimedOut,
            "ledger lock held too long",
        )))
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, input: Option<&str>) -> LedgerEntry {
        LedgerEntry {
            stage: stage.to_string(),
            config_hash: "cfg".to_string(),
            code_version: "test".to_string(),
            input_checkpoint: input.map(|s| s.to_string()),
            output_checkpoint: Some("out".to_string()),
            data_hash: None,
            started_unix_ms: 0,
            finished_unix_ms: 0,
        }
    }

    #[test]
    fn append_and_find_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = ExperimentLedger::open(dir.path()).unwrap();
        ledger.append(entry("poison", Some("ck-a")), stage_clock()).unwrap();
        ledger.append(entry("align:rag", Some("ck-b")), stage_clock()).unwrap();
        let found = ledger.find("poison", "cfg", Some("ck-a"), None).unwrap();
        assert!(found.is_some());
        assert_eq!(found.unwrap().output_checkpoint.as_deref(), Some("out"));
        assert!(ledger.find("poison", "cfg", Some("ck-z"), None).unwrap().is_none());
        assert!(ledger.find("poison", "other", Some("ck-a"), None).unwrap().is_none());
        assert_eq!(ledger.entries().unwrap().len(), 2);
    }

    #[test]
    fn lock_file_is_released() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = ExperimentLedger::open(dir.path()).unwrap();
        ledger.append(entry("a", None), stage_clock()).unwrap();
        assert!(!dir.path().join("ledger.lock").exists());
    }
}
