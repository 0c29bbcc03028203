//! Run-directory persistence.
//!
//! Layout of a single optimization run:
//!
//! ```text
//! <dir>/
//!   .lock                  pid of the owning process while it runs
//!   config.json            effective configuration snapshot
//!   records/iter-0000.json one file per completed iteration
//!   runlog.json            the full RunLog, written on completion
//!   cache/                 content-addressed backend call cache
//! ```
//!
//! Record files are written once each (temp file, then rename), so an
//! interrupted run loses at most the iteration in flight and resumes from
//! the contiguous prefix of records on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimizer::{IterationRecord, RunLog};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_DIR: &str = "records";
pub const RUNLOG_FILE: &str = "runlog.json";
pub const CACHE_DIR: &str = "cache";

/// Exclusive ownership of a directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if !lock_is_stale(&path) {
                        return Err(Error::Locked { path: dir.to_path_buf() });
                    }
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::Locked { path: dir.to_path_buf() })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A lock whose owner pid no longer exists. Only decidable where `/proc`
/// is mounted; elsewhere every lock is treated as live.
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = text.trim().parse::<u32>() else {
        return false;
    };
    let proc_root = Path::new("/proc");
    pid != std::process::id() && proc_root.join("self").exists() && !proc_root.join(pid.to_string()).exists()
}

/// Serializes `value` as pretty JSON with a trailing newline, atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::RunDir {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug)]
pub struct RunDirectory {
    root: PathBuf,
    _lock: Option<DirLock>,
}

impl RunDirectory {
    /// Opens (creating if needed) and locks `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let lock = DirLock::acquire(&root)?;
        Ok(Self { root, _lock: Some(lock) })
    }

    /// Opens `root` without taking the lock; used for per-prompt runs inside
    /// a sweep directory that is itself locked.
    pub fn open_unlocked(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, _lock: None })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join(CACHE_DIR)
    }

    pub fn record_path(&self, iteration: u32) -> PathBuf {
        self.root.join(RECORDS_DIR).join(format!("iter-{iteration:04}.json"))
    }

    pub fn write_config<T: Serialize + ?Sized>(&self, config: &T) -> Result<()> {
        write_json(&self.root.join(CONFIG_FILE), config)
    }

    pub fn read_config<T: DeserializeOwned>(&self) -> Result<Option<T>> {
        let path = self.root.join(CONFIG_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn write_record(&self, record: &IterationRecord) -> Result<()> {
        write_json(&self.record_path(record.iteration), record)
    }

    /// The contiguous run of records starting at iteration 0.
    pub fn load_records(&self) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::new();
        loop {
            let path = self.record_path(records.len() as u32);
            if !path.exists() {
                break;
            }
            let record: IterationRecord = read_json(&path)?;
            if record.iteration as usize != records.len() {
                return Err(Error::RunDir {
                    path,
                    message: format!("holds iteration {}", record.iteration),
                });
            }
            records.push(record);
        }
        Ok(records)
    }

    pub fn write_runlog(&self, log: &RunLog) -> Result<()> {
        write_json(&self.root.join(RUNLOG_FILE), log)
    }

    pub fn load_runlog(&self) -> Result<Option<RunLog>> {
        let path = self.root.join(RUNLOG_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }
}
