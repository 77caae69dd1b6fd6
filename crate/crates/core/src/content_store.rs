//! Digest-addressed blob store on untrusted storage.
//!
//! Blobs live at `<dir>/ab/cd/<hex digest>`. Every read rehashes the bytes
//! before returning them.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone)]
pub struct ContentStore {
    dir: PathBuf,
}

impl ContentStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_owned();
        fsutil::create_dir(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.dir.join(&hex[0..2]).join(&hex[2..4]).join(hex)
    }

    /// Stores `bytes` durably and returns their digest. Storing the same
    /// bytes twice keeps one copy.
    pub fn put(&self, bytes: &[u8]) -> Result<Digest> {
        let digest = Digest::of(bytes);
        let path = self.path_of(&digest);
        if self.get_verified(&digest).is_ok() {
            return Ok(digest);
        }
        let parent = path.parent().expect("blob path has a parent");
        fsutil::create_dir(parent)?;
        fsutil::atomic_write(&path, bytes)?;
        Ok(digest)
    }

    /// Returns the blob only if its bytes hash to `digest`.
    pub fn get_verified(&self, digest: &Digest) -> Result<Vec<u8>> {
        let path = self.path_of(digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(Error::NotFound(*digest)),
            Err(e) => return Err(Error::Io { path, source: e }),
        };
        if Digest::of(&bytes) != *digest {
            return Err(Error::IntegrityViolation(*digest));
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.path_of(digest).exists()
    }

    /// Deletes the blob. Reference checks belong to the caller, which holds
    /// the catalog; removing an absent blob is a no-op.
    pub(crate) fn remove(&self, digest: &Digest) -> Result<bool> {
        let path = self.path_of(digest);
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(false),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }

    /// Total bytes of stored blobs.
    pub fn total_bytes(&self) -> u64 {
        walkdir::WalkDir::new(&self.dir)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .filter_map(|e| e.metadata().ok())
            .map(|m| m.len())
            .sum()
    }

    pub fn blob_count(&self) -> usize {
        walkdir::WalkDir::new(&self.dir)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .count()
    }
}
