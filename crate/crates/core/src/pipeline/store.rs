//! Content-addressed artifact store and the experiment-directory lock.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Blobs under `<root>/objects/<sha256>`.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: &Path) -> Result<Self> {
        let objects = root.join("objects");
        fs::create_dir_all(&objects).map_err(|e| Error::io(&objects, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn key(parts: &[&[u8]]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        hex::encode(h.finalize())
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(hash)
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.path(hash).is_file()
    }

    /// Store `bytes` and return their hash. Existing objects are not rewritten.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.path(&hash);
        if !path.is_file() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        let path = self.path(hash);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != hash {
            return Err(Error::Data(format!("object {hash} is corrupt")));
        }
        Ok(bytes)
    }

    /// Record `name → hash` so a later run can find an artifact by its inputs.
    pub fn set_ref(&self, name: &str, hash: &str) -> Result<()> {
        let path = self.root.join("refs").join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, hash).map_err(|e| Error::io(&path, e))
    }

    pub fn get_ref(&self, name: &str) -> Option<String> {
        fs::read_to_string(self.root.join("refs").join(name)).ok().map(|s| s.trim().to_string())
    }
}

/// Exclusive writer lock on an experiment directory, released on drop.
#[derive(Debug)]
pub struct PipelineLock {
    path: PathBuf,
}

impl PipelineLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(Error::Conflict(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for PipelineLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
