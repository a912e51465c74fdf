//! Content-addressed response cache.
//!
//! A cache is a directory of files named by the lowercase hex digest of the
//! canonicalized request; payloads are stored verbatim. Writes go through a
//! temp file and an atomic rename, so concurrent writers are safe and a
//! write of an already-present key is a no-op.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use crate::error::{Error, Result};

/// Handle to a cache directory.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

/// One cached response.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub key: [u8; 32],
    pub payload: Vec<u8>,
    pub created_at: SystemTime,
}

impl ResponseCache {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    fn path_for(&self, key: &[u8; 32]) -> PathBuf {
        self.dir.join(hex::encode(key))
    }

    pub fn get(&self, key: &[u8; 32]) -> Result<Option<Vec<u8>>> {
        let path = self.path_for(key);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn entry(&self, key: &[u8; 32]) -> Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        let payload = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let created_at = std::fs::metadata(&path)
            .and_then(|m| m.modified())
            .unwrap_or(SystemTime::UNIX_EPOCH);
        Ok(Some(CacheEntry {
            key: *key,
            payload,
            created_at,
        }))
    }

    /// Stores `payload` under `key`. Existing entries are left untouched.
    pub fn put(&self, key: &[u8; 32], payload: &[u8]) -> Result<()> {
        let path = self.path_for(key);
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(
            ".{}.{}.tmp",
            hex::encode(&key[..8]),
            std::process::id()
        ));
        std::fs::write(&tmp, payload).map_err(|e| Error::io(&tmp, e))?;
        match std::fs::rename(&tmp, &path) {
            Ok(()) => Ok(()),
            Err(e) => {
                let _ = std::fs::remove_file(&tmp);
                // A concurrent writer may have won the rename; that is fine.
                if path.exists() {
                    Ok(())
                } else {
                    Err(Error::io(path, e))
                }
            }
        }
    }

    pub fn len(&self) -> Result<usize> {
        let entries = std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut count = 0;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            if entry.file_name().to_string_lossy().len() == 64 {
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}
