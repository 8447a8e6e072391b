use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::ScoreMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLine {
    pub anchor_id: String,
    pub candidate_id: String,
    pub su: f64,
    #[serde(default)]
    pub mode: ScoreMode,
}

/// Append-only log of completed pair scores. Entries scored under a
/// different mode are ignored on load.
#[derive(Debug)]
pub struct Checkpoint {
    mode: ScoreMode,
    done: Mutex<HashMap<(String, String), f64>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl Checkpoint {
    pub fn in_memory(mode: ScoreMode) -> Self {
        Checkpoint {
            mode,
            done: Mutex::new(HashMap::new()),
            writer: None,
            path: None,
        }
    }

    pub fn open(path: &Path, mode: ScoreMode) -> Result<Self> {
        let mut done = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                // a torn final line from an aborted run is tolerated
                let rec: CheckpointLine = match serde_json::from_str(&line) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("checkpoint {} line {}: {e}; ignored", path.display(), i + 1);
                        continue;
                    }
                };
                if rec.mode == mode {
                    done.insert((rec.anchor_id, rec.candidate_id), rec.su);
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let existing = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if existing.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(Checkpoint {
            mode,
            done: Mutex::new(done),
            writer: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, anchor_id: &str, candidate_id: &str) -> Option<f64> {
        self.done
            .lock()
            .unwrap()
            .get(&(anchor_id.to_string(), candidate_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.done.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, anchor_id: &str, candidate_id: &str, su: f64) -> Result<()> {
        if let Some(w) = &self.writer {
            let line = serde_json::to_string(&CheckpointLine {
                anchor_id: anchor_id.to_string(),
                candidate_id: candidate_id.to_string(),
                su,
                mode: self.mode,
            })?;
            let mut w = w.lock().unwrap();
            let path = self.path.as_deref().unwrap_or(Path::new("checkpoint"));
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.done
            .lock()
            .unwrap()
            .insert((anchor_id.to_string(), candidate_id.to_string()), su);
        Ok(())
    }
}
