//! Versioned model and data storage with get/put semantics.
//!
//! On-disk layout of [`DirStore`]:
//!
//! ```text
//! <root>/models/<id>.model        one immutable file per model
//! <root>/log/<segment>.ndjson     exploration log, one JoinedInteraction per line
//! <root>/journal/<id>.jnl         learner journal segment closed by checkpoint <id>
//! ```
//!
//! Segment and id file stems are zero-padded decimal so lexical order is
//! numeric order.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::join::JoinedInteraction;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("model {0} not found")]
    NotFound(u64),
    #[error("store has no models")]
    Empty,
    #[error("model {0} already written")]
    Duplicate(u64),
    #[error("store unavailable")]
    Unavailable,
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait Store: Send + Sync {
    /// Writes model bytes once. `latest` moves only forward.
    fn put_model(&self, id: u64, bytes: &[u8]) -> Result<(), StoreError>;
    /// Exact bytes of `id`, or of the latest model for `None`.
    fn get_model(&self, id: Option<u64>) -> Result<Vec<u8>, StoreError>;
    fn latest_model_id(&self) -> Result<Option<u64>, StoreError>;
    fn model_ids(&self) -> Result<Vec<u64>, StoreError>;

    /// Appends one canonical log line (without newline); returns its index.
    fn append_line(&self, line: &str) -> Result<u64, StoreError>;
    fn read_lines(&self, range: Range<u64>) -> Result<Vec<String>, StoreError>;
    fn interaction_count(&self) -> Result<u64, StoreError>;

    fn put_journal_segment(&self, id: u64, bytes: &[u8]) -> Result<(), StoreError>;
    /// All journal segments in id order.
    fn journal_segments(&self) -> Result<Vec<(u64, Vec<u8>)>, StoreError>;

    fn append_interaction(&self, ji: &JoinedInteraction) -> Result<u64, StoreError> {
        self.append_line(&ji.to_line())
    }

    fn read_interactions(&self, range: Range<u64>) -> Result<Vec<JoinedInteraction>, StoreError> {
        self.read_lines(range)?
            .iter()
            .map(|l| JoinedInteraction::from_line(l).map_err(|e| StoreError::Corrupt(e.to_string())))
            .collect()
    }

    fn read_all_interactions(&self) -> Result<Vec<JoinedInteraction>, StoreError> {
        let n = self.interaction_count()?;
        self.read_interactions(0..n)
    }
}

#[derive(Default)]
struct MemInner {
    models: BTreeMap<u64, Vec<u8>>,
    latest: Option<u64>,
    lines: Vec<String>,
    journals: BTreeMap<u64, Vec<u8>>,
}

/// In-memory store for simulations and tests. Can be switched offline or
/// told to fail the next few writes.
#[derive(Default)]
pub struct MemStore {
    inner: Mutex<MemInner>,
    offline: AtomicBool,
    failing_puts: AtomicU32,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, up: bool) {
        self.offline.store(!up, Ordering::SeqCst);
    }

    /// The next `n` model or journal writes fail with `Unavailable`.
    pub fn fail_next_puts(&self, n: u32) {
        self.failing_puts.store(n, Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.offline.load(Ordering::SeqCst) {
            Err(StoreError::Unavailable)
        } else {
            Ok(())
        }
    }

    fn check_put(&self) -> Result<(), StoreError> {
        self.check()?;
        let failing = self
            .failing_puts
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        if failing.is_ok() {
            return Err(StoreError::Unavailable);
        }
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MemInner> {
        self.inner.lock().expect("store lock poisoned")
    }
}

impl Store for MemStore {
    fn put_model(&self, id: u64, bytes: &[u8]) -> Result<(), StoreError> {
        self.check_put()?;
        let mut inner = self.lock();
        if inner.models.contains_key(&id) {
            return Err(StoreError::Duplicate(id));
        }
        inner.models.insert(id, bytes.to_vec());
        if inner.latest.is_none_or(|l| id > l) {
            inner.latest = Some(id);
        }
        Ok(())
    }

    fn get_model(&self, id: Option<u64>) -> Result<Vec<u8>, StoreError> {
        self.check()?;
        let inner = self.lock();
        let id = match id {
            Some(id) => id,
            None => inner.latest.ok_or(StoreError::Empty)?,
        };
        inner.models.get(&id).cloned().ok_or(StoreError::NotFound(id))
    }

    fn latest_model_id(&self) -> Result<Option<u64>, StoreError> {
        self.check()?;
        Ok(self.lock().latest)
    }

    fn model_ids(&self) -> Result<Vec<u64>, StoreError> {
        self.check()?;
        Ok(self.lock().models.keys().copied().collect())
    }

    fn append_line(&self, line: &str) -> Result<u64, StoreError> {
        self.check()?;
        let mut inner = self.lock();
        inner.lines.push(line.to_owned());
        Ok(inner.lines.len() as u64 - 1)
    }

    fn read_lines(&self, range: Range<u64>) -> Result<Vec<String>, StoreError> {
        self.check()?;
        let inner = self.lock();
        let end = (range.end as usize).min(inner.lines.len());
        let start = (range.start as usize).min(end);
        Ok(inner.lines[start..end].to_vec())
    }

    fn interaction_count(&self) -> Result<u64, StoreError> {
        self.check()?;
        Ok(self.lock().lines.len() as u64)
    }

    fn put_journal_segment(&self, id: u64, bytes: &[u8]) -> Result<(), StoreError> {
        self.check_put()?;
        self.lock().journals.insert(id, bytes.to_vec());
        Ok(())
    }

    fn journal_segments(&self) -> Result<Vec<(u64, Vec<u8>)>, StoreError> {
        self.check()?;
        Ok(self
            .lock()
            .journals
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect())
    }
}

struct LogWriter {
    count: u64,
    file: Option<File>,
    segment: u64,
}

/// Filesystem-directory store.
pub struct DirStore {
    root: PathBuf,
    segment_lines: u64,
    sync: bool,
    latest: Mutex<Option<u64>>,
    log: Mutex<LogWriter>,
}

const DEFAULT_SEGMENT_LINES: u64 = 100_000;

fn parse_stem(path: &Path, ext: &str) -> Option<u64> {
    if path.extension()?.to_str()? != ext {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

fn list_ids(dir: &Path, ext: &str) -> io::Result<Vec<u64>> {
    let mut ids: Vec<u64> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| parse_stem(&e.path(), ext))
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8], sync: bool) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if sync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)
}

impl DirStore {
    /// Opens or creates a store. A torn final log line left by a crash is
    /// truncated away; it was never acknowledged.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with(root, DEFAULT_SEGMENT_LINES, false)
    }

    pub fn open_with(
        root: impl Into<PathBuf>,
        segment_lines: u64,
        sync: bool,
    ) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["models", "log", "journal"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let latest = list_ids(&root.join("models"), "model")?.last().copied();
        let segments = list_ids(&root.join("log"), "ndjson")?;
        let mut count = 0;
        let mut last_segment = 0;
        for (i, seg) in segments.iter().enumerate() {
            let path = root.join("log").join(format!("{seg:08}.ndjson"));
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
            if complete < bytes.len() {
                if i + 1 != segments.len() {
                    return Err(StoreError::Corrupt(format!("torn line inside {}", path.display())));
                }
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(complete as u64)?;
            }
            count += bytes[..complete].iter().filter(|&&b| b == b'\n').count() as u64;
            last_segment = *seg;
        }
        let expected = count.div_ceil(segment_lines.max(1));
        if !segments.is_empty() && last_segment + 1 < expected {
            return Err(StoreError::Corrupt("log segments out of sequence".into()));
        }
        Ok(DirStore {
            root,
            segment_lines: segment_lines.max(1),
            sync,
            latest: Mutex::new(latest),
            log: Mutex::new(LogWriter {
                count,
                file: None,
                segment: u64::MAX,
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn model_path(&self, id: u64) -> PathBuf {
        self.root.join("models").join(format!("{id:012}.model"))
    }

    fn segment_path(&self, seg: u64) -> PathBuf {
        self.root.join("log").join(format!("{seg:08}.ndjson"))
    }

    fn journal_path(&self, id: u64) -> PathBuf {
        self.root.join("journal").join(format!("{id:012}.jnl"))
    }
}

impl Store for DirStore {
    fn put_model(&self, id: u64, bytes: &[u8]) -> Result<(), StoreError> {
        let mut latest = self.latest.lock().expect("store lock poisoned");
        let path = self.model_path(id);
        if path.exists() {
            return Err(StoreError::Duplicate(id));
        }
        write_atomic(&path, bytes, self.sync)?;
        if latest.is_none_or(|l| id > l) {
            *latest = Some(id);
        }
        Ok(())
    }

    fn get_model(&self, id: Option<u64>) -> Result<Vec<u8>, StoreError> {
        let id = match id {
            Some(id) => id,
            None => self.latest_model_id()?.ok_or(StoreError::Empty)?,
        };
        match fs::read(self.model_path(id)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(id)),
            Err(e) => Err(e.into()),
        }
    }

    fn latest_model_id(&self) -> Result<Option<u64>, StoreError> {
        Ok(*self.latest.lock().expect("store lock poisoned"))
    }

    fn model_ids(&self) -> Result<Vec<u64>, StoreError> {
        Ok(list_ids(&self.root.join("models"), "model")?)
    }

    fn append_line(&self, line: &str) -> Result<u64, StoreError> {
        debug_assert!(!line.contains('\n'));
        let mut log = self.log.lock().expect("store lock poisoned");
        let seg = log.count / self.segment_lines;
        if log.segment != seg || log.file.is_none() {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.segment_path(seg))?;
            log.file = Some(f);
            log.segment = seg;
        }
        let f = log.file.as_mut().expect("segment open");
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        f.write_all(&buf)?;
        if self.sync {
            f.sync_data()?;
        }
        log.count += 1;
        Ok(log.count - 1)
    }

    fn read_lines(&self, range: Range<u64>) -> Result<Vec<String>, StoreError> {
        let count = self.interaction_count()?;
        let end = range.end.min(count);
        let mut out = Vec::new();
        let mut idx = range.start;
        while idx < end {
            let seg = idx / self.segment_lines;
            let base = seg * self.segment_lines;
            let mut text = String::new();
            let mut f = File::open(self.segment_path(seg))?;
            f.seek(SeekFrom::Start(0))?;
            f.read_to_string(&mut text)?;
            let take_to = end.min(base + self.segment_lines);
            for line in text
                .lines()
                .skip((idx - base) as usize)
                .take((take_to - idx) as usize)
            {
                out.push(line.to_owned());
            }
            idx = take_to;
        }
        Ok(out)
    }

    fn interaction_count(&self) -> Result<u64, StoreError> {
        Ok(self.log.lock().expect("store lock poisoned").count)
    }

    fn put_journal_segment(&self, id: u64, bytes: &[u8]) -> Result<(), StoreError> {
        Ok(write_atomic(&self.journal_path(id), bytes, self.sync)?)
    }

    fn journal_segments(&self) -> Result<Vec<(u64, Vec<u8>)>, StoreError> {
        list_ids(&self.root.join("journal"), "jnl")?
            .into_iter()
            .map(|id| Ok((id, fs::read(self.journal_path(id))?)))
            .collect()
    }
}
