//! Content-addressed response cache on disk.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, CompletionResponse, LlmError};

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: &'a str,
    request: &'a CompletionRequest,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    backend: String,
    request: CompletionRequest,
    text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Wraps a backend with a cache keyed by the SHA-256 of the canonical JSON
/// of (backend id, request). Entries are written atomically, so concurrent
/// writers of the same key leave one complete file.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            inner,
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn key(&self, request: &CompletionRequest) -> String {
        let material = serde_json::to_vec(&KeyMaterial {
            backend: self.inner.id(),
            request,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(material))
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn read(&self, path: &Path, key: &str) -> Option<String> {
        let bytes = std::fs::read(path).ok()?;
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(e) if e.key == key => Some(e.text),
            _ => {
                log::warn!("ignoring corrupt cache entry {}", path.display());
                None
            }
        }
    }

    fn write(&self, path: &Path, entry: &Entry) -> Result<(), LlmError> {
        let err = |e: std::io::Error| LlmError::Cache(format!("{}: {e}", path.display()));
        let parent = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(parent).map_err(err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(err)?;
        tmp.write_all(&serde_json::to_vec_pretty(entry).expect("entry serializes"))
            .map_err(err)?;
        tmp.persist(path).map_err(|e| err(e.error))?;
        Ok(())
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let key = self.key(request);
        let path = self.path(&key);
        if let Some(text) = self.read(&path, &key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(CompletionResponse {
                text,
                backend_id: self.inner.id().to_owned(),
                cached: true,
                latency_ms: 0,
            });
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.complete(request)?;
        self.write(
            &path,
            &Entry {
                key,
                backend: self.inner.id().to_owned(),
                request: request.clone(),
                text: response.text.clone(),
            },
        )?;
        Ok(response)
    }
}
