//! Append-only JSONL log of decisions and clock moves.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::service::NurseDecision;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Clock { week: i64 },
    Decision(NurseDecision),
}

pub struct DecisionLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl DecisionLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        Ok(DecisionLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn replay(&self) -> Result<Vec<LogEntry>, StoreError> {
        let name = self.path.display().to_string();
        let f = File::open(&self.path).map_err(|source| StoreError::Io {
            path: name.clone(),
            source,
        })?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|source| StoreError::Io {
                path: name.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                    path: name.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?,
            );
        }
        Ok(out)
    }

    pub fn append(&self, entry: &LogEntry) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(entry).expect("log entries serialize");
        line.push('\n');
        let mut f = self.file.lock().expect("log lock");
        f.write_all(line.as_bytes())
            .and_then(|_| f.sync_data())
            .map_err(|source| StoreError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hapi_core::claims::{PatientId, RiskLabel};

    #[test]
    fn entries_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let log = DecisionLog::open(dir.path().join("log.jsonl")).unwrap();
        let d = NurseDecision {
            patient_id: PatientId::new("P1"),
            call: true,
            predicted_complication: RiskLabel::Gdb,
            note: "follow up, \"soon\"".into(),
            decided_at_week: 4,
            decided_at: chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
        };
        log.append(&LogEntry::Clock { week: 4 }).unwrap();
        log.append(&LogEntry::Decision(d.clone())).unwrap();
        drop(log);
        let log = DecisionLog::open(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(
            log.replay().unwrap(),
            vec![LogEntry::Clock { week: 4 }, LogEntry::Decision(d)]
        );
    }

    #[test]
    fn corrupt_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        fs::write(&p, "{\"kind\":\"clock\",\"week\":1}\nnot json\n").unwrap();
        let err = DecisionLog::open(&p).unwrap().replay().unwrap_err();
        assert!(matches!(err, StoreError::Corrupt { line: 2, .. }), "{err}");
    }
}
