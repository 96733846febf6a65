//! Measurement persistence: an append-only NDJSON log compacted into a JSON snapshot.
//!
//! Every write appends one line and syncs it before returning. Opening the store replays the
//! log over the snapshot, then compacts: the new snapshot is written to a temporary file and
//! renamed into place before the log is truncated. Replay is idempotent (puts overwrite by id,
//! deletes of absent ids are no-ops), so a crash at any point between those steps loses
//! nothing. A torn final log line is dropped.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use daem_core::tme::point_to_line_distance;
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

pub const LOG_FILE: &str = "measurements.ndjson";
pub const SNAPSHOT_FILE: &str = "measurements.snapshot.json";
const COMPACT_EVERY: usize = 256;

/// Which viewer panel the measurement was taken on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Panel {
    #[default]
    Wsi,
    Tme,
}

/// Client payload: endpoints only. Any distance fields a client sends are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementInput {
    pub p: [f64; 2],
    pub a: [f64; 2],
    pub b: [f64; 2],
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub panel: Panel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub id: u64,
    pub wsi_id: String,
    pub panel: Panel,
    /// Level-0 pixel coordinates.
    pub p: [f64; 2],
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub distance_px: f64,
    pub distance_um: f64,
    pub note: String,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum LogEntry {
    Put { record: Measurement },
    Delete { wsi_id: String, id: u64 },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    next_id: u64,
    records: Vec<Measurement>,
}

struct Inner {
    log: File,
    records: BTreeMap<u64, Measurement>,
    next_id: u64,
    appended: usize,
}

pub struct MeasurementStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

fn store_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

impl Inner {
    fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Put { record } => {
                self.next_id = self.next_id.max(record.id + 1);
                self.records.insert(record.id, record);
            }
            LogEntry::Delete { wsi_id, id } => {
                if self.records.get(&id).is_some_and(|m| m.wsi_id == wsi_id) {
                    self.records.remove(&id);
                }
            }
        }
    }
}

impl MeasurementStore {
    pub fn open(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let snapshot: Snapshot = match fs::read_to_string(&snap_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Failure::json(&snap_path, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => return Err(Failure::io(&snap_path, e)),
        };
        let log_path = dir.join(LOG_FILE);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Failure::io(&log_path, e))?;
        let mut inner = Inner {
            log,
            records: BTreeMap::new(),
            next_id: snapshot.next_id,
            appended: 0,
        };
        for r in snapshot.records {
            inner.apply(LogEntry::Put { record: r });
        }
        let text = fs::read_to_string(&log_path).map_err(|e| Failure::io(&log_path, e))?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str::<LogEntry>(line) {
                Ok(entry) => inner.apply(entry),
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {}
                Err(e) => {
                    return Err(Failure::Validation(format!("{}: line {}: {e}", log_path.display(), i + 1)))
                }
            }
        }
        let store = MeasurementStore {
            dir: dir.to_path_buf(),
            inner: Mutex::new(inner),
        };
        store.compact()?;
        Ok(store)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn append(&self, inner: &mut Inner, entry: &LogEntry) -> CliResult<()> {
        let path = self.dir.join(LOG_FILE);
        let mut line = serde_json::to_string(entry).map_err(|e| Failure::Other(e.to_string()))?;
        line.push('\n');
        inner.log.write_all(line.as_bytes()).map_err(|e| store_err(&path, e))?;
        inner.log.sync_data().map_err(|e| store_err(&path, e))?;
        inner.appended += 1;
        Ok(())
    }

    fn compact_locked(&self, inner: &mut Inner) -> CliResult<()> {
        let snap = Snapshot {
            next_id: inner.next_id,
            records: inner.records.values().cloned().collect(),
        };
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let text = serde_json::to_string(&snap).map_err(|e| Failure::Other(e.to_string()))?;
        {
            let mut f = File::create(&tmp).map_err(|e| store_err(&tmp, e))?;
            f.write_all(text.as_bytes()).map_err(|e| store_err(&tmp, e))?;
            f.sync_all().map_err(|e| store_err(&tmp, e))?;
        }
        fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))?;
        inner.log.set_len(0).map_err(|e| store_err(&self.dir.join(LOG_FILE), e))?;
        inner.appended = 0;
        Ok(())
    }

    /// Folds the log into the snapshot.
    pub fn compact(&self) -> CliResult<()> {
        let mut inner = self.lock();
        self.compact_locked(&mut inner)
    }

    /// Stores a measurement with server-computed distances. Fails validation when `a == b`.
    pub fn insert(&self, wsi_id: &str, input: &MeasurementInput, mpp: f64) -> CliResult<Measurement> {
        let d = point_to_line_distance(input.p, input.a, input.b, mpp)
            .map_err(|e| Failure::Validation(e.to_string()))?;
        let created_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let mut inner = self.lock();
        let record = Measurement {
            id: inner.next_id,
            wsi_id: wsi_id.to_string(),
            panel: input.panel,
            p: input.p,
            a: input.a,
            b: input.b,
            distance_px: d.px,
            distance_um: d.um,
            note: input.note.clone(),
            created_ms,
        };
        let entry = LogEntry::Put { record: record.clone() };
        self.append(&mut inner, &entry)?;
        inner.apply(entry);
        if inner.appended >= COMPACT_EVERY {
            self.compact_locked(&mut inner)?;
        }
        Ok(record)
    }

    /// Measurements of one slide in id order, with distances re-derived from the stored
    /// endpoints and `mpp`.
    pub fn list(&self, wsi_id: &str, mpp: f64) -> CliResult<Vec<Measurement>> {
        let inner = self.lock();
        inner
            .records
            .values()
            .filter(|m| m.wsi_id == wsi_id)
            .map(|m| {
                let d = point_to_line_distance(m.p, m.a, m.b, mpp)
                    .map_err(|e| Failure::Validation(format!("measurement {}: {e}", m.id)))?;
                Ok(Measurement {
                    distance_px: d.px,
                    distance_um: d.um,
                    ..m.clone()
                })
            })
            .collect()
    }

    /// Returns false when no measurement `id` exists on `wsi_id`.
    pub fn delete(&self, wsi_id: &str, id: u64) -> CliResult<bool> {
        let mut inner = self.lock();
        if !inner.records.get(&id).is_some_and(|m| m.wsi_id == wsi_id) {
            return Ok(false);
        }
        let entry = LogEntry::Delete {
            wsi_id: wsi_id.to_string(),
            id,
        };
        self.append(&mut inner, &entry)?;
        inner.apply(entry);
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
