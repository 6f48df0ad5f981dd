//! On-disk run records: `config.json`, `tasks/<id>.json` and
//! `exchanges/<key>.txt` (same format as the response cache).

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::gateway::{CacheEntry, ChatExchange, ResponseCache};
use crate::pipeline::{RunConfig, TaskRecord};

pub const SCHEMA_VERSION: &str = "1.0";
pub const SUPPORTED_MAJOR: u64 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Keys whose values legitimately differ between otherwise identical runs.
pub const VOLATILE_KEYS: [&str; 6] = [
    "latency_ms",
    "elapsed_ms",
    "cache_hit",
    "attempt_count",
    "created_at",
    "tool_version",
];

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: malformed record file: {message}", path.display())]
    Json { path: PathBuf, message: String },
    #[error("run record schema {found} is not supported (this build reads {SUPPORTED_MAJOR}.x)")]
    UnsupportedSchema { found: String },
    #[error("{} is not a run record (no config.json)", .0.display())]
    NotARecord(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub schema_version: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub suite_id: String,
    /// Suite order; task files are read back in this order.
    pub task_ids: Vec<String>,
    pub config: RunConfig,
}

impl RecordHeader {
    pub fn new(suite_id: impl Into<String>, task_ids: Vec<String>, config: RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            tool_version: TOOL_VERSION.into(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            suite_id: suite_id.into(),
            task_ids,
            config,
        }
    }
}

fn check_schema(value: &Value) -> Result<(), RecordError> {
    let found = value
        .get("schema_version")
        .and_then(Value::as_str)
        .unwrap_or("missing")
        .to_string();
    let major = found.split('.').next().and_then(|m| m.parse::<u64>().ok());
    if major != Some(SUPPORTED_MAJOR) {
        return Err(RecordError::UnsupportedSchema { found });
    }
    Ok(())
}

/// File name for a task id: ids are kept when filesystem-safe, otherwise
/// sanitized and suffixed with a short digest to stay unique.
pub fn task_file_name(task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if safe == task_id && !safe.starts_with('.') {
        format!("{safe}.json")
    } else {
        let digest = hex::encode(&Sha256::digest(task_id.as_bytes())[..4]);
        format!("{safe}-{digest}.json")
    }
}

/// Write via a temporary sibling and rename, so readers never see a torn file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RecordError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| RecordError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub struct RunStore {
    root: PathBuf,
    header: RecordHeader,
}

impl RunStore {
    pub fn create(root: impl Into<PathBuf>, header: RecordHeader) -> Result<Self, RecordError> {
        let root = root.into();
        for dir in [root.join("tasks"), root.join("exchanges")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let store = Self { root, header };
        store.write_header()?;
        Ok(store)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RecordError> {
        let root = root.into();
        let path = root.join("config.json");
        if !path.is_file() {
            return Err(RecordError::NotARecord(root));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| RecordError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        check_schema(&value)?;
        let mut header: RecordHeader = serde_json::from_value(value).map_err(|e| RecordError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        header.config.out_dir = root.clone();
        Ok(Self { root, header })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn header(&self) -> &RecordHeader {
        &self.header
    }

    fn write_header(&self) -> Result<(), RecordError> {
        let json = serde_json::to_string_pretty(&self.header).expect("header serializes");
        write_atomic(&self.root.join("config.json"), json.as_bytes())
    }

    pub fn task_path(&self, task_id: &str) -> PathBuf {
        self.root.join("tasks").join(task_file_name(task_id))
    }

    pub fn write_task(&self, record: &TaskRecord) -> Result<(), RecordError> {
        let json = serde_json::to_string_pretty(record).expect("task record serializes");
        write_atomic(&self.task_path(&record.task.task_id), json.as_bytes())
    }

    pub fn read_task(&self, task_id: &str) -> Result<Option<TaskRecord>, RecordError> {
        let path = self.task_path(task_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_str(&text).map(Some).map_err(|e| RecordError::Json {
            path,
            message: e.to_string(),
        })
    }

    /// Task records present on disk, in suite order.
    pub fn tasks(&self) -> Result<Vec<TaskRecord>, RecordError> {
        let mut out = Vec::new();
        for id in &self.header.task_ids {
            if let Some(r) = self.read_task(id)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn exchange_dir(&self) -> PathBuf {
        self.root.join("exchanges")
    }

    pub fn exchange_cache(&self) -> Result<ResponseCache, RecordError> {
        let dir = self.exchange_dir();
        ResponseCache::new(&dir).map_err(io_err(&dir))
    }

    pub fn write_exchanges(&self, exchanges: &[ChatExchange]) -> Result<(), RecordError> {
        let cache = self.exchange_cache()?;
        for e in exchanges {
            let key = e.key();
            let path = cache.path_for(&key);
            if path.is_file() {
                continue;
            }
            cache.put(&key, &e.request, &e.reply_text).map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Write an auxiliary report file at the record root.
    pub fn write_report(&self, name: &str, contents: &str) -> Result<PathBuf, RecordError> {
        let path = self.root.join(name);
        write_atomic(&path, contents.as_bytes())?;
        Ok(path)
    }
}

/// Remove volatile keys at any depth.
pub fn mask_volatile(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for k in VOLATILE_KEYS {
                map.remove(k);
            }
            map.values_mut().for_each(mask_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(mask_volatile),
        _ => {}
    }
}

fn masked_json(path: &Path) -> Result<Value, RecordError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| RecordError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    mask_volatile(&mut v);
    Ok(v)
}

/// Byte equality, except the header tag: identical requests from different
/// stages share a key, and whichever finished first names the file.
fn same_exchange(a: &[u8], b: &[u8]) -> bool {
    match (CacheEntry::decode(a), CacheEntry::decode(b)) {
        (Ok(mut x), Ok(y)) => {
            x.header.request_tag = y.header.request_tag.clone();
            x == y
        }
        _ => a == b,
    }
}

/// Differences between two records after masking volatile fields. Only
/// exchanges referenced by task files are compared.
pub fn compare_records(left: &Path, right: &Path) -> Result<Vec<String>, RecordError> {
    let mut diffs = Vec::new();
    let (a, b) = (RunStore::open(left)?, RunStore::open(right)?);
    if masked_json(&left.join("config.json"))? != masked_json(&right.join("config.json"))? {
        diffs.push("config.json differs".into());
    }
    let mut keys = BTreeSet::new();
    for id in &a.header.task_ids {
        let (pa, pb) = (a.task_path(id), b.task_path(id));
        match (pa.is_file(), pb.is_file()) {
            (true, true) => {
                if masked_json(&pa)? != masked_json(&pb)? {
                    diffs.push(format!("task {id} differs"));
                }
            }
            (false, false) => {}
            _ => diffs.push(format!("task {id} present in only one record")),
        }
        if let Some(r) = a.read_task(id)? {
            keys.extend(r.exchanges.into_iter().map(|e| e.key));
        }
    }
    for key in keys {
        let fa = fs::read(a.exchange_dir().join(format!("{key}.txt")));
        let fb = fs::read(b.exchange_dir().join(format!("{key}.txt")));
        match (fa, fb) {
            (Ok(x), Ok(y)) if same_exchange(&x, &y) => {}
            (Ok(_), Ok(_)) => diffs.push(format!("exchange {key} differs")),
            _ => diffs.push(format!("exchange {key} missing")),
        }
    }
    Ok(diffs)
}
